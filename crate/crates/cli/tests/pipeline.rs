use std::fs;
use std::path::Path;

use ergoseg_cli::run;

fn ok(args: &[&str]) {
    let mut argv = vec!["ergoseg"];
    argv.extend_from_slice(args);
    assert_eq!(run(&argv), 0, "ergoseg {}", args.join(" "));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_eval_predict_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let manifest = data.join("manifest.txt");
    ok(&["synth", "--out", p(&data), "--classes", "5", "--videos", "8", "--seed", "7", "--min-frames", "40", "--max-frames", "60"]);
    assert!(manifest.exists());
    ok(&["reba", "--manifest", p(&manifest), "--smoothing", "2"]);
    assert!(fs::read_to_string(&manifest).unwrap().contains("smoothing 2"));
    ok(&[
        "train", "--manifest", p(&manifest), "--variant", "mtl-emb", "--epochs", "2", "--lr", "1e-3", "--out", p(&run_dir), "--quiet",
    ]);
    let ck = run_dir.join("best.ckpt");
    assert!(ck.exists() && run_dir.join("history.json").exists());

    let metrics = dir.path().join("metrics.json");
    ok(&["eval", "--checkpoint", p(&ck), "--manifest", p(&manifest), "--split", "val", "--out", p(&metrics)]);
    let report = ergoseg::metrics::MetricsReport::from_json(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(report.videos.len(), 2);
    assert!(report.aggregate.accuracy.is_some() && report.aggregate.mse.is_some());

    let video = data.join("videos").join(format!("{}.csv", report.videos[0].video));
    let preds = dir.path().join("preds");
    ok(&["predict", "--checkpoint", p(&ck), "--out", p(&preds), p(&video)]);
    let pred_file = preds.join(format!("{}.pred.csv", report.videos[0].video));
    let rows = fs::read_to_string(&pred_file).unwrap().lines().count() - 1;
    assert_eq!(rows, report.videos[0].frames);

    let out = dir.path().join("fig").join("ribbon");
    ok(&["report", "--sequence", p(&video), "--predictions", p(&pred_file), "--out", p(&out)]);
    let csv = fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, rows);
    ok(&["report", "--checkpoint", p(&ck), "--manifest", p(&manifest), "--video", &report.videos[0].video, "--out", p(&out)]);
    assert!(fs::read_to_string(out.with_extension("svg")).unwrap().contains("<svg"));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    assert_eq!(run(["ergoseg", "train", "--manifest", p(&missing)]), 3);
    assert_eq!(run(["ergoseg", "train", "--manifest", p(&missing), "--lr=-1"]), 2);
    assert_eq!(run(["ergoseg", "report", "--out", "x"]), 2);
}
