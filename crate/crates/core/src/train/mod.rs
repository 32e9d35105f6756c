//! Optimization loop: Adam, learning-rate sweep with early stopping,
//! checkpoints and evaluation.

mod adam;
mod checkpoint;
mod config;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, NonFiniteGradient};
pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, ParamEntry};
pub use config::{ConfigError, TrainConfig, OUTPUT_DIR_ENV, SEED_ENV};

use crate::data::{pad_and_mask, DataError, Dataset, PaddedBatch, SkeletonSequence, Split};
use crate::layers::Ctx;
use crate::losses::{has_loss, hpa_loss, mtl_loss, LossWeights};
use crate::metrics::{ConfusionMatrix, MetricsReport, VideoMetrics, VideoPrediction};
use crate::model::{Model, ModelConfig, ModelVariant};
use crate::tensor::{Gradients, ParamStore, Tensor, Var};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("every learning rate diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("topology hash {dataset} of the dataset does not match {checkpoint} of the checkpoint")]
    TopologyMismatch { dataset: String, checkpoint: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Process exit code: 2 config, 3 data, 4 divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) => 2,
            TrainError::Data(_) | TrainError::TopologyMismatch { .. } => 3,
            TrainError::Diverged(_) => 4,
            TrainError::Checkpoint(_) | TrainError::Io(_) => 1,
        }
    }
}

/// Loss terms of one pass. `hpa` and `has` are present for the heads the
/// variant has; `total` is the quantity that is optimized and monitored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub hpa: Option<f64>,
    pub has: Option<f64>,
}

impl LossValues {
    fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        let sum = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
        };
        self.hpa = sum(self.hpa, o.hpa);
        self.has = sum(self.has, o.has);
    }
}

/// Tape variables of one sequence's losses.
pub struct LossVars {
    pub total: Var,
    pub hpa: Option<Var>,
    pub has: Option<Var>,
    pub logits: Option<Var>,
    pub risk: Option<Var>,
}

/// Forward pass plus the variant's loss on one sequence: joints `T x N x 3`
/// with per-frame labels, targets and mask of length `T`.
pub fn sequence_loss(
    model: &Model,
    weights: &LossWeights,
    ctx: &mut Ctx,
    joints: &Tensor,
    labels: &[usize],
    targets: &[f64],
    mask: &[bool],
) -> LossVars {
    let out = model.forward(ctx, joints);
    let hpa = out.risk.map(|r| hpa_loss(ctx, r, targets, weights, mask).value);
    let has = out.logits.map(|l| has_loss(ctx, l, labels, mask).value);
    let total = match (hpa, has) {
        (Some(p), Some(s)) => mtl_loss(ctx, p, s, weights),
        (Some(p), None) => p,
        (None, Some(s)) => s,
        (None, None) => unreachable!("every variant has a head"),
    };
    LossVars {
        total,
        hpa,
        has,
        logits: out.logits,
        risk: out.risk,
    }
}

/// Prediction of one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemOutput {
    pub losses: LossValues,
    pub labels: Option<Vec<usize>>,
    pub probabilities: Option<Vec<f64>>,
    pub risk: Option<Vec<f64>>,
}

/// Evaluation-mode losses and predictions for each item of a padded batch.
/// Every item is run over its real frames only, so padding never reaches
/// the network.
pub fn batch_outputs(model: &Model, weights: &LossWeights, store: &ParamStore, batch: &PaddedBatch) -> Vec<ItemOutput> {
    (0..batch.len())
        .map(|b| {
            let t = batch.lengths[b];
            let mut ctx = Ctx::eval(store);
            let joints = batch.joints_prefix(b, t);
            let v = sequence_loss(
                model,
                weights,
                &mut ctx,
                &joints,
                &batch.label_row(b)[..t],
                &batch.target_row(b)[..t],
                &batch.mask_row(b)[..t],
            );
            let val = |x: Var| ctx.tape.value(x).data()[0];
            let losses = LossValues {
                total: val(v.total),
                hpa: v.hpa.map(val),
                has: v.has.map(val),
            };
            let probabilities = v.logits.map(|l| {
                let mut p = ctx.tape.value(l).clone();
                let cl = p.cols();
                p.data_mut().chunks_mut(cl).for_each(crate::tensor::softmax_in_place);
                p.into_data()
            });
            let labels = probabilities.as_ref().map(|p| argmax_rows(p, model.config.classes));
            ItemOutput {
                losses,
                labels,
                probabilities,
                risk: v.risk.map(|r| ctx.tape.value(r).data().to_vec()),
            }
        })
        .collect()
}

fn argmax_rows(p: &[f64], classes: usize) -> Vec<usize> {
    p.chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Gradients and loss values of one training batch, summed over items.
fn batch_gradients(
    model: &Model,
    weights: &LossWeights,
    store: &ParamStore,
    batch: &PaddedBatch,
    rng: &mut ChaCha8Rng,
) -> (Gradients, LossValues) {
    let mut total: Option<Gradients> = None;
    let mut values = LossValues::default();
    for b in 0..batch.len() {
        let t = batch.lengths[b];
        let mut ctx = Ctx::train(store, rng.gen());
        let joints = batch.joints_prefix(b, t);
        let v = sequence_loss(
            model,
            weights,
            &mut ctx,
            &joints,
            &batch.label_row(b)[..t],
            &batch.target_row(b)[..t],
            &batch.mask_row(b)[..t],
        );
        let val = |x: Var| ctx.tape.value(x).data()[0];
        values.add(&LossValues {
            total: val(v.total),
            hpa: v.hpa.map(val),
            has: v.has.map(val),
        });
        let g = ctx.tape.backward(v.total);
        match total.as_mut() {
            Some(acc) => acc.accumulate_params(&g),
            None => total = Some(g),
        }
    }
    (total.expect("non-empty batch"), values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossValues,
    pub val: LossValues,
    /// Effective `[α, β, γ]` after the epoch.
    pub weights: [f64; 3],
    pub val_accuracy: Option<f64>,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed { stopped_early: bool },
    Diverged { epoch: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRun {
    pub learning_rate: f64,
    pub status: RunStatus,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub variant: ModelVariant,
    pub seed: u64,
    pub train_videos: Vec<String>,
    pub val_videos: Vec<String>,
    pub runs: Vec<LrRun>,
    pub best_run: Option<usize>,
}

impl History {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Early-stopping bookkeeping on a monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            waited: 0,
        }
    }

    /// Records an epoch's loss; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, b)) if loss >= b => {
                self.waited += 1;
                false
            }
            _ => {
                self.best = Some((epoch, loss));
                self.waited = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.waited >= self.patience
    }
}

/// The fitted model of the winning learning rate.
pub struct FitOutcome {
    pub history: History,
    pub checkpoint: Checkpoint,
}

/// Train and validation indices: the manifest split when it has training
/// videos, otherwise a seeded 15-of-20 style split. Without validation
/// videos the training videos are monitored.
pub fn split_indices(dataset: &Dataset, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let train = dataset.split_indices(Split::Train);
    if !train.is_empty() {
        let val = dataset.split_indices(Split::Val);
        return if val.is_empty() { (train.clone(), train) } else { (train, val) };
    }
    let n = dataset.sequences.len();
    crate::data::random_split(n, crate::data::default_train_count(n), seed)
}

/// Builds a model and its loss weights for a dataset.
pub fn build_model(config: &TrainConfig, dataset: &Dataset) -> (Model, LossWeights, ParamStore) {
    let mut mc = ModelConfig::new(config.variant, dataset.class_count());
    mc.tcn.dropout = config.dropout;
    mc.tcn.kernel_size = config.tcn_kernel;
    let mut store = ParamStore::new();
    let model = Model::new(mc, dataset.topology.clone(), &mut store, config.seed);
    let weights = LossWeights::new(&mut store);
    for id in weights.ids() {
        *store.get_mut(id) = Tensor::scalar(config.loss_weight_init);
    }
    (model, weights, store)
}

fn refs<'a>(dataset: &'a Dataset, idx: &[usize]) -> Vec<&'a SkeletonSequence> {
    idx.iter().map(|&i| &dataset.sequences[i]).collect()
}

fn full_batch(dataset: &Dataset, idx: &[usize]) -> PaddedBatch {
    let seqs = refs(dataset, idx);
    let t_max = seqs.iter().map(|s| s.frames()).max().unwrap_or(0);
    pad_and_mask(&seqs, t_max, dataset.class_count())
}

/// Runs the learning-rate sweep and keeps the checkpoint with the lowest
/// validation loss. Writes `best.ckpt` and `history.json` into the
/// checkpoint directory when one is configured.
pub fn fit(config: &TrainConfig, dataset: &Dataset) -> Result<FitOutcome, TrainError> {
    fit_with_progress(config, dataset, |_, _| {})
}

/// [`fit`] calling `progress(learning_rate, record)` after every epoch.
pub fn fit_with_progress(
    config: &TrainConfig,
    dataset: &Dataset,
    mut progress: impl FnMut(f64, &EpochRecord),
) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    let (train_idx, val_idx) = split_indices(dataset, config.seed);
    if train_idx.is_empty() {
        return Err(DataError::Invalid {
            video: "-".into(),
            msg: "no training videos".into(),
        }
        .into());
    }
    let val_batch = full_batch(dataset, &val_idx);
    let class_names: Vec<String> = dataset.manifest.classes.iter().map(|c| c.name.clone()).collect();
    let mut history = History {
        variant: config.variant,
        seed: config.seed,
        train_videos: train_idx.iter().map(|&i| dataset.sequences[i].id.clone()).collect(),
        val_videos: val_idx.iter().map(|&i| dataset.sequences[i].id.clone()).collect(),
        runs: Vec::new(),
        best_run: None,
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    for &lr in &config.learning_rates {
        let (model, weights, mut store) = build_model(config, dataset);
        if config.init_risk_offset {
            let (sum, n) = train_idx
                .iter()
                .flat_map(|&i| &dataset.sequences[i].reba_smooth)
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            model.set_risk_offset(&mut store, sum / n as f64);
        }
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut stopper = EarlyStopping::new(config.patience);
        let mut run = LrRun {
            learning_rate: lr,
            status: RunStatus::Completed { stopped_early: false },
            best_epoch: None,
            best_val_loss: None,
            epochs: Vec::new(),
        };
        let mut best_store = store.clone();
        let mut order = train_idx.clone();
        'epochs: for epoch in 1..=config.max_epochs {
            order.shuffle(&mut rng);
            let mut train = LossValues::default();
            for chunk in order.chunks(config.batch_size) {
                let batch = full_batch(dataset, chunk);
                let (grads, values) = batch_gradients(&model, &weights, &store, &batch, &mut rng);
                train.add(&values);
                let step = if values.total.is_finite() {
                    adam.step(&mut store, &grads, lr).map_err(|e| e.to_string())
                } else {
                    Err(format!("training loss {}", values.total))
                };
                if let Err(reason) = step {
                    run.status = RunStatus::Diverged { epoch, reason };
                    break 'epochs;
                }
            }
            let outputs = batch_outputs(&model, &weights, &store, &val_batch);
            let mut val = LossValues::default();
            outputs.iter().for_each(|o| val.add(&o.losses));
            if !val.total.is_finite() {
                run.status = RunStatus::Diverged {
                    epoch,
                    reason: format!("validation loss {}", val.total),
                };
                break;
            }
            let (val_accuracy, val_mse) = summary_metrics(&outputs, &val_batch);
            let record = EpochRecord {
                epoch,
                train,
                val,
                weights: weights.effective(&store),
                val_accuracy,
                val_mse,
            };
            progress(lr, &record);
            run.epochs.push(record);
            if stopper.observe(epoch, val.total) {
                best_store = store.clone();
            }
            if stopper.should_stop() {
                run.status = RunStatus::Completed { stopped_early: true };
                break;
            }
        }
        if let Some((epoch, loss)) = stopper.best {
            run.best_epoch = Some(epoch);
            run.best_val_loss = Some(loss);
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                history.best_run = Some(history.runs.len());
                let ck = Checkpoint::new(&model, &best_store, class_names.clone(), lr, epoch, config.seed);
                best = Some((loss, ck));
            }
        }
        history.runs.push(run);
    }
    let Some((_, checkpoint)) = best else {
        let reasons: Vec<String> = history
            .runs
            .iter()
            .map(|r| format!("lr {}: {:?}", r.learning_rate, r.status))
            .collect();
        return Err(TrainError::Diverged(reasons.join("; ")));
    };
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        std::fs::write(dir.join(HISTORY_FILE), history.to_json())?;
    }
    Ok(FitOutcome { history, checkpoint })
}

/// Loads the manifest named in the config and fits.
pub fn fit_from_config(config: &TrainConfig) -> Result<(Dataset, FitOutcome), TrainError> {
    config.validate()?;
    let manifest = config
        .manifest
        .as_deref()
        .ok_or_else(|| ConfigError::Invalid("no manifest given".into()))?;
    let dataset = crate::data::load_dataset(manifest)?;
    let outcome = fit(config, &dataset)?;
    Ok((dataset, outcome))
}

fn summary_metrics(outputs: &[ItemOutput], batch: &PaddedBatch) -> (Option<f64>, Option<f64>) {
    let mut hits = 0usize;
    let mut sq = 0.0;
    let mut frames = 0usize;
    let (mut has_labels, mut has_risk) = (false, false);
    for (b, o) in outputs.iter().enumerate() {
        let t = batch.lengths[b];
        frames += t;
        if let Some(l) = &o.labels {
            has_labels = true;
            hits += l.iter().zip(&batch.label_row(b)[..t]).filter(|(p, g)| p == g).count();
        }
        if let Some(r) = &o.risk {
            has_risk = true;
            sq += r.iter().zip(&batch.target_row(b)[..t]).map(|(p, g)| (p - g) * (p - g)).sum::<f64>();
        }
    }
    let f = frames.max(1) as f64;
    (has_labels.then(|| hits as f64 / f), has_risk.then(|| sq / f))
}

/// Per-video metrics over real frames for the given items of a batch.
pub fn evaluate_batch(model: &Model, store: &ParamStore, batch: &PaddedBatch) -> MetricsReport {
    let weights = LossWeights::find(store).expect("store holds loss weights");
    let classes = model.config.classes;
    let outputs = batch_outputs(model, &weights, store, batch);
    let mut confusion = model.config.variant.has_segmentation().then(|| ConfusionMatrix::new(classes));
    let videos: Vec<VideoMetrics> = outputs
        .iter()
        .enumerate()
        .map(|(b, o)| {
            let t = batch.lengths[b];
            let gt = &batch.label_row(b)[..t];
            if let (Some(c), Some(p)) = (confusion.as_mut(), &o.labels) {
                c.add(p, gt);
            }
            VideoMetrics::compute(
                &VideoPrediction {
                    video: &batch.ids[b],
                    gt_labels: gt,
                    pred_labels: o.labels.as_deref(),
                    probabilities: o.probabilities.as_deref(),
                    gt_risk: &batch.target_row(b)[..t],
                    pred_risk: o.risk.as_deref(),
                },
                classes,
            )
        })
        .collect();
    MetricsReport::new(model.config.variant.as_str(), classes, videos, confusion)
}

/// Metrics of a model on dataset videos `idx`.
pub fn evaluate(model: &Model, store: &ParamStore, dataset: &Dataset, idx: &[usize]) -> MetricsReport {
    evaluate_batch(model, store, &full_batch(dataset, idx))
}

/// Evaluates a checkpoint, refusing a dataset with a different skeleton.
pub fn evaluate_checkpoint(checkpoint: &Checkpoint, dataset: &Dataset, idx: &[usize]) -> Result<MetricsReport, TrainError> {
    let hash = dataset.topology.hash();
    if hash != checkpoint.header.topology_hash {
        return Err(TrainError::TopologyMismatch {
            dataset: hash,
            checkpoint: checkpoint.header.topology_hash.clone(),
        });
    }
    if checkpoint.header.model.classes != dataset.class_count() {
        return Err(DataError::Invalid {
            video: "-".into(),
            msg: format!(
                "dataset has {} classes, checkpoint {}",
                dataset.class_count(),
                checkpoint.header.model.classes
            ),
        }
        .into());
    }
    let (model, store) = checkpoint.instantiate()?;
    Ok(evaluate(&model, &store, dataset, idx))
}

/// Indices for a named split: `train`, `val`, or `all`.
pub fn resolve_split(dataset: &Dataset, name: &str, seed: u64) -> Option<Vec<usize>> {
    let (train, val) = split_indices(dataset, seed);
    match name {
        "train" => Some(train),
        "val" => Some(val),
        "test" => Some(dataset.split_indices(Split::Test)),
        "all" => Some((0..dataset.sequences.len()).collect()),
        _ => None,
    }
}

/// Default location of the checkpoint inside a run directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}
