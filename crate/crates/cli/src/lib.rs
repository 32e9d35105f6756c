//! `ergoseg` command line: synthesize data, score REBA, train, evaluate,
//! predict and render reports.

pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ergoseg::data::{
    generate_synthetic, load_dataset, read_sequence, write_sequence, write_synthetic, DataError, Dataset,
    SkeletonSequence, SynthConfig,
};
use ergoseg::model::ModelVariant;
use ergoseg::train::{
    evaluate_checkpoint, fit_with_progress, resolve_split, Checkpoint, CheckpointError, ConfigError, TrainConfig,
    TrainError, HISTORY_FILE,
};

pub use report::{class_color, label_runs, RibbonReport};

#[derive(Parser, Debug)]
#[command(name = "ergoseg", version, about = "Skeleton activity segmentation and REBA risk regression")]
struct Cli {
    /// Print a one-line JSON summary on stdout when the command finishes.
    #[arg(long, global = true)]
    json_summary: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Add raw and smoothed REBA columns to every sequence of a manifest.
    Reba(RebaArgs),
    /// Train a model; writes best.ckpt and history.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Per-frame labels and risk for sequence files.
    Predict(PredictArgs),
    /// Ribbon report (SVG plus CSV) for one video.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    videos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    segments: usize,
    #[arg(long, default_value_t = 120)]
    min_frames: usize,
    #[arg(long, default_value_t = 200)]
    max_frames: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    smoothing: f64,
    /// Seed of the train/val split; defaults to --seed.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RebaArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// New smoothing factor, also written to the manifest.
    #[arg(long)]
    smoothing: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// key = value config file; environment and flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    variant: Option<ModelVariant>,
    /// Comma-separated learning rates to sweep.
    #[arg(long, value_delimiter = ',')]
    lr: Option<Vec<f64>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Temporal kernel size of the segmentation head.
    #[arg(long)]
    tcn_kernel: Option<usize>,
    /// Run directory for the checkpoint and history.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train, val, test or all.
    #[arg(long, default_value = "val")]
    split: String,
    /// Metrics report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory receiving `<id>.pred.csv` per sequence.
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    sequences: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Predict with this checkpoint (needs --manifest and --video).
    #[arg(long, requires_all = ["manifest", "video"], conflicts_with = "predictions")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Video id within the manifest.
    #[arg(long)]
    video: Option<String>,
    /// Sequence file with REBA columns (used with --predictions).
    #[arg(long, requires = "predictions")]
    sequence: Option<PathBuf>,
    /// CSV written by `predict`.
    #[arg(long, requires = "sequence")]
    predictions: Option<PathBuf>,
    /// Output prefix: writes PREFIX.svg and PREFIX.csv.
    #[arg(long)]
    out: PathBuf,
}

/// Failure of a subcommand with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Self {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        TrainError::from(e).into()
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        TrainError::from(e).into()
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        TrainError::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let line: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    eprintln!("invocation: {}", line.join(" "));
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Reba(a) => reba(a),
        Command::Train(a) => train(a, |k| std::env::var(k).ok()),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Report(a) => render_report(a),
    };
    match outcome {
        Ok(summary) => {
            if cli.json_summary {
                println!("{}", json!({ "status": "ok", "summary": summary }));
            }
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            if cli.json_summary {
                println!("{}", json!({ "status": "error", "code": f.code, "message": f.message }));
            }
            f.code
        }
    }
}

fn synth(a: SynthArgs) -> Result<Value, Failure> {
    let cfg = SynthConfig {
        classes: a.classes,
        videos: a.videos,
        segments_per_video: a.segments,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        noise: a.noise,
        smoothing: a.smoothing,
        ..SynthConfig::default()
    };
    if cfg.classes == 0 || cfg.videos == 0 || cfg.segments_per_video == 0 {
        return Err(Failure::usage("--classes, --videos and --segments must be positive"));
    }
    if cfg.min_frames < cfg.segments_per_video || cfg.max_frames < cfg.min_frames {
        return Err(Failure::usage("need segments <= min-frames <= max-frames"));
    }
    if !(cfg.noise >= 0.0 && cfg.smoothing >= 0.0) {
        return Err(Failure::usage("--noise and --smoothing must be nonnegative"));
    }
    let data = generate_synthetic(&cfg, a.seed);
    let manifest = write_synthetic(&a.out, &data, a.split_seed.unwrap_or(a.seed))?;
    let frames: usize = data.sequences.iter().map(SkeletonSequence::frames).sum();
    Ok(json!({
        "command": "synth",
        "manifest": manifest,
        "videos": data.sequences.len(),
        "frames": frames,
    }))
}

fn reba(a: RebaArgs) -> Result<Value, Failure> {
    if let Some(s) = a.smoothing {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Failure::usage("--smoothing must be nonnegative"));
        }
        let text = fs::read_to_string(&a.manifest).map_err(|source| DataError::Io {
            path: a.manifest.clone(),
            source,
        })?;
        let mut manifest = ergoseg::data::Manifest::parse(&text, &a.manifest)?;
        manifest.smoothing = s;
        fs::write(&a.manifest, manifest.to_text())?;
    }
    // loading recomputes any REBA columns that are stale or missing
    let dataset = load_dataset(&a.manifest)?;
    let hash = dataset.topology.hash();
    for (seq, video) in dataset.sequences.iter().zip(&dataset.manifest.videos) {
        write_sequence(&dataset.root.join(&video.path), seq, &hash, Some(dataset.manifest.smoothing))?;
    }
    let mean = |f: &dyn Fn(&SkeletonSequence) -> f64| {
        dataset.sequences.iter().map(f).sum::<f64>() / dataset.sequences.len().max(1) as f64
    };
    Ok(json!({
        "command": "reba",
        "videos": dataset.sequences.len(),
        "smoothing": dataset.manifest.smoothing,
        "mean_raw": mean(&|s| s.reba_raw.iter().map(|&v| v as f64).sum::<f64>() / s.frames().max(1) as f64),
    }))
}

/// Config file, then `ERGOSEG_*` variables from `env`, then flags.
fn train_config(a: &TrainArgs, env: impl Fn(&str) -> Option<String>) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    cfg.apply_env(env)?;
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(lr) = &a.lr {
        cfg.learning_rates = lr.clone();
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = a.tcn_kernel {
        cfg.tcn_kernel = v;
    }
    if let Some(d) = &a.out {
        cfg.checkpoint_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, env: impl Fn(&str) -> Option<String>) -> Result<Value, Failure> {
    let mut cfg = train_config(&a, env)?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| Failure::usage("no manifest: pass --manifest or set it in the config"))?;
    let dir = cfg.checkpoint_dir.get_or_insert_with(|| PathBuf::from("runs")).clone();
    let dataset = load_dataset(&manifest)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let quiet = a.quiet;
    let outcome = fit_with_progress(&cfg, &dataset, |lr, r| {
        if !quiet {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            eprintln!(
                "lr {lr:e} epoch {:>3}  train {:.4}  val {:.4}  acc {}  mse {}",
                r.epoch,
                r.train.total,
                r.val.total,
                opt(r.val_accuracy),
                opt(r.val_mse)
            );
        }
    })?;
    let h = &outcome.history;
    let best = h.best_run.map(|i| &h.runs[i]);
    Ok(json!({
        "command": "train",
        "variant": cfg.variant.as_str(),
        "checkpoint": dir.join(ergoseg::train::CHECKPOINT_FILE),
        "history": dir.join(HISTORY_FILE),
        "learning_rate": best.map(|r| r.learning_rate),
        "best_epoch": best.and_then(|r| r.best_epoch),
        "best_val_loss": best.and_then(|r| r.best_val_loss),
    }))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn eval(a: EvalArgs) -> Result<Value, Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.manifest)?;
    let idx = resolve_split(&dataset, &a.split, ck.header.seed)
        .ok_or_else(|| Failure::usage(format!("unknown split `{}`", a.split)))?;
    if idx.is_empty() {
        return Err(Failure::data(format!("split `{}` has no videos", a.split)));
    }
    let report = evaluate_checkpoint(&ck, &dataset, &idx)?;
    let text = report.to_json();
    match &a.out {
        Some(p) => {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(d)?;
            }
            fs::write(p, &text)?;
        }
        None => println!("{text}"),
    }
    let agg = &report.aggregate;
    Ok(json!({
        "command": "eval",
        "split": a.split,
        "videos": report.videos.len(),
        "accuracy": agg.accuracy.map(|m| m.mean),
        "edit": agg.edit.map(|m| m.mean),
        "mse": agg.mse.map(|m| m.mean),
        "spearman": agg.spearman.map(|m| m.mean),
    }))
}

/// Per-frame model output for one sequence.
struct Prediction {
    labels: Option<Vec<usize>>,
    risk: Option<Vec<f64>>,
}

fn predict_sequence(ck: &Checkpoint, seq: &SkeletonSequence) -> Result<Prediction, Failure> {
    let (model, store) = ck.instantiate()?;
    if seq.joint_count != model.joint_count() {
        return Err(Failure::data(format!(
            "{}: {} joints, checkpoint expects {}",
            seq.id,
            seq.joint_count,
            model.joint_count()
        )));
    }
    if seq.frames() == 0 {
        return Err(Failure::data(format!("{}: no frames", seq.id)));
    }
    let out = model.predict(&store, &seq.joint_tensor());
    Ok(Prediction {
        labels: out.labels(),
        risk: out.risk,
    })
}

fn read_for_checkpoint(path: &Path, ck: &Checkpoint) -> Result<SkeletonSequence, Failure> {
    let topology = ck.topology()?;
    let file = read_sequence(path, topology.joint_count())?;
    if !file.topology_hash.is_empty() && file.topology_hash != ck.header.topology_hash {
        return Err(TrainError::TopologyMismatch {
            dataset: file.topology_hash,
            checkpoint: ck.header.topology_hash.clone(),
        }
        .into());
    }
    Ok(file.sequence)
}

fn write_predictions(path: &Path, names: &[String], p: &Prediction, frames: usize) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).map_err(csv_failure)?;
    w.write_record(["frame", "label", "class", "risk"]).map_err(csv_failure)?;
    for t in 0..frames {
        let label = p.labels.as_ref().map(|l| l[t]);
        let class = label.and_then(|l| names.get(l)).cloned().unwrap_or_default();
        let risk = p.risk.as_ref().map(|r| r[t].to_string()).unwrap_or_default();
        let label = label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([t.to_string(), label, class, risk]).map_err(csv_failure)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure::data(e.to_string())
}

fn predict(a: PredictArgs) -> Result<Value, Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    for path in &a.sequences {
        let seq = read_for_checkpoint(path, &ck)?;
        let p = predict_sequence(&ck, &seq)?;
        let out = a.out.join(format!("{}.pred.csv", seq.id));
        write_predictions(&out, &ck.header.class_names, &p, seq.frames())?;
        written.push(json!({ "video": seq.id, "frames": seq.frames(), "file": out }));
    }
    Ok(json!({ "command": "predict", "outputs": written }))
}

/// Labels, class names and risk read back from a `predict` CSV.
fn read_predictions(path: &Path) -> Result<(Vec<usize>, Vec<(usize, String)>, Vec<f64>), Failure> {
    let mut r = csv::Reader::from_path(path).map_err(csv_failure)?;
    let (mut labels, mut names, mut risk) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_failure)?;
        let bad = |what: &str| Failure::data(format!("{} row {i}: missing or bad {what}", path.display()));
        let label: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("label"))?;
        let value: f64 = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("risk"))?;
        if let Some(n) = rec.get(2).filter(|n| !n.is_empty()) {
            names.push((label, n.to_string()));
        }
        labels.push(label);
        risk.push(value);
    }
    Ok((labels, names, risk))
}

fn dataset_video<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a SkeletonSequence, Failure> {
    dataset
        .sequences
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Failure::data(format!("video `{id}` is not in the manifest")))
}

fn render_report(a: ReportArgs) -> Result<Value, Failure> {
    let report = match (&a.checkpoint, &a.sequence) {
        (Some(ck_path), _) => {
            let ck = load_checkpoint(ck_path)?;
            let dataset = load_dataset(a.manifest.as_deref().expect("clap requires --manifest"))?;
            if dataset.topology.hash() != ck.header.topology_hash {
                return Err(TrainError::TopologyMismatch {
                    dataset: dataset.topology.hash(),
                    checkpoint: ck.header.topology_hash.clone(),
                }
                .into());
            }
            let seq = dataset_video(&dataset, a.video.as_deref().expect("clap requires --video"))?;
            let p = predict_sequence(&ck, seq)?;
            let (Some(labels), Some(risk)) = (p.labels, p.risk) else {
                return Err(Failure::usage(format!(
                    "report needs both heads; checkpoint variant is {}",
                    ck.header.model.variant
                )));
            };
            RibbonReport::new(
                seq.id.clone(),
                ck.header.class_names.clone(),
                seq.labels.clone(),
                labels,
                seq.reba_smooth.clone(),
                risk,
            )
        }
        (None, Some(seq_path)) => {
            let file = read_sequence(seq_path, ergoseg::graph::SkeletonTopology::canonical().joint_count())?;
            let seq = file.sequence;
            if seq.reba_smooth.len() != seq.frames() {
                return Err(Failure::data(format!(
                    "{}: no REBA columns; run `ergoseg reba` first",
                    seq_path.display()
                )));
            }
            let (labels, named, risk) = read_predictions(a.predictions.as_deref().expect("clap requires it"))?;
            let classes = seq.labels.iter().chain(&labels).max().map_or(0, |m| m + 1);
            let mut names: Vec<String> = (0..classes).map(|c| format!("class {c}")).collect();
            for (l, n) in named {
                names[l] = n;
            }
            RibbonReport::new(seq.id.clone(), names, seq.labels, labels, seq.reba_smooth, risk)
        }
        (None, None) => return Err(Failure::usage("report needs --checkpoint or --sequence/--predictions")),
    }
    .map_err(|e| Failure::data(e.to_string()))?;
    let svg = a.out.with_extension("svg");
    let csv = a.out.with_extension("csv");
    if let Some(d) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    fs::write(&svg, report.to_svg())?;
    fs::write(&csv, report.to_csv())?;
    Ok(json!({
        "command": "report",
        "video": report.video,
        "frames": report.frames(),
        "svg": svg,
        "csv": csv,
    }))
}
