use std::fs;

use ergoseg::data::{generate_synthetic, write_sequence, SynthConfig};
use ergoseg::graph::SkeletonTopology;
use ergoseg_cli::run;

#[test]
fn predict_processes_sequences_longer_than_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let run_dir = dir.path().join("run");
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();
    let synth = [
        "ergoseg", "synth", "--out", &s(&data), "--videos", "2", "--classes", "3", "--min-frames", "30", "--max-frames", "30",
    ];
    assert_eq!(run(synth), 0);
    let train = [
        "ergoseg", "train", "--manifest", &s(&data.join("manifest.txt")), "--epochs", "1", "--lr", "1e-3", "--out", &s(&run_dir),
        "--quiet",
    ];
    assert_eq!(run(train), 0);

    let cfg = SynthConfig {
        classes: 3,
        videos: 1,
        min_frames: 150,
        max_frames: 150,
        ..SynthConfig::default()
    };
    let long = &generate_synthetic(&cfg, 11).sequences[0];
    let path = dir.path().join("long.csv");
    write_sequence(&path, long, &SkeletonTopology::canonical().hash(), None).unwrap();
    let preds = dir.path().join("preds");
    let predict = ["ergoseg", "predict", "--checkpoint", &s(&run_dir.join("best.ckpt")), "--out", &s(&preds), &s(&path)];
    assert_eq!(run(predict), 0);
    let text = fs::read_to_string(preds.join(format!("{}.pred.csv", long.id))).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 150);
    assert!(rows.iter().all(|r| {
        let f: Vec<&str> = r.split(',').collect();
        f[1].parse::<usize>().unwrap() < 3 && f[3].parse::<f64>().unwrap().is_finite()
    }));
}
