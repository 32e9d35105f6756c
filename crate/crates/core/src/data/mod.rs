//! Skeleton sequences, padding, splits, file formats and the synthetic
//! generator.

mod io;
mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::SkeletonTopology;
use crate::model::COORDS;
use crate::reba::{self, AngleError, BodyAxes, RebaContext};
use crate::tensor::Tensor;

pub use io::{
    load_dataset, read_sequence, write_sequence, ClassInfo, Dataset, Manifest, ManifestVideo, SequenceFile, Split,
    MANIFEST_VERSION,
};
pub use synth::{generate_synthetic, pose_for_class, write_synthetic, Pose, SynthConfig, SyntheticData};

/// Value written into every channel of a padded frame.
pub const PAD_VALUE: f64 = -1.0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("video {video}: {msg}")]
    Invalid { video: String, msg: String },
    #[error("video {video} row {row}: label {label} not below class count {classes}")]
    LabelOutOfRange {
        video: String,
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("video {video}: topology hash {found} does not match {expected}")]
    TopologyMismatch {
        video: String,
        expected: String,
        found: String,
    },
    #[error("video {video} row {row}: {source}")]
    Angles {
        video: String,
        row: usize,
        #[source]
        source: AngleError,
    },
    #[error("{} load error(s):\n{}", .0.len(), .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Many(Vec<DataError>),
}

/// One video: joints `T x N x 3` (meters, joint-major per frame), frame
/// labels, and REBA targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSequence {
    pub id: String,
    pub fps: f64,
    pub joint_count: usize,
    pub joints: Vec<f64>,
    pub labels: Vec<usize>,
    pub reba_raw: Vec<u8>,
    pub reba_smooth: Vec<f64>,
}

impl SkeletonSequence {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.joint_count * COORDS;
        &self.joints[t * w..(t + 1) * w]
    }

    /// `T x N x 3` tensor of the joints.
    pub fn joint_tensor(&self) -> Tensor {
        Tensor::new(&[self.frames(), self.joint_count, COORDS], self.joints.clone())
    }

    /// Checks the shared-length and range invariants.
    pub fn validate(&self, classes: usize) -> Result<(), DataError> {
        let t = self.frames();
        let invalid = |msg: String| DataError::Invalid {
            video: self.id.clone(),
            msg,
        };
        if t == 0 {
            return Err(invalid("no frames".into()));
        }
        if self.joints.len() != t * self.joint_count * COORDS {
            return Err(invalid(format!(
                "{} joint values for {t} frames of {} joints",
                self.joints.len(),
                self.joint_count
            )));
        }
        if self.reba_raw.len() != t || self.reba_smooth.len() != t {
            return Err(invalid("REBA columns differ in length from labels".into()));
        }
        if let Some((row, &label)) = self.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange {
                video: self.id.clone(),
                row,
                label,
                classes,
            });
        }
        if let Some(row) = self.reba_raw.iter().position(|s| !(reba::MIN_SCORE..=reba::MAX_SCORE).contains(s)) {
            return Err(invalid(format!("row {row}: raw REBA {} outside 1..=15", self.reba_raw[row])));
        }
        if self.joints.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite joint coordinate".into()));
        }
        Ok(())
    }

    /// Recomputes raw REBA per frame from the skeleton and each frame's class
    /// context, then smooths it.
    pub fn compute_reba(
        &mut self,
        topology: &SkeletonTopology,
        contexts: &[RebaContext],
        smoothing: f64,
    ) -> Result<(), DataError> {
        let axes = BodyAxes::default();
        let mut raw = Vec::with_capacity(self.frames());
        for t in 0..self.frames() {
            let angles = reba::extract_angles(self.frame(t), topology, &axes).map_err(|source| DataError::Angles {
                video: self.id.clone(),
                row: t,
                source,
            })?;
            let ctx = contexts.get(self.labels[t]).copied().unwrap_or_default();
            raw.push(reba::reba_score(&angles, &ctx));
        }
        self.reba_smooth = reba::smooth_scores(&raw, smoothing);
        self.reba_raw = raw;
        Ok(())
    }
}

/// Sequences right-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub t_max: usize,
    pub joint_count: usize,
    /// `B x 3 x N x T_max`, padded frames hold [`PAD_VALUE`].
    pub joints: Vec<f64>,
    /// `B x T_max`, padded frames hold `ignore_label`.
    pub labels: Vec<usize>,
    /// `B x T_max` smoothed REBA, padded frames hold [`PAD_VALUE`].
    pub targets: Vec<f64>,
    /// `B x T_max`, true on real frames.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
    pub ignore_label: usize,
    pub ids: Vec<String>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn mask_row(&self, b: usize) -> &[bool] {
        &self.mask[b * self.t_max..(b + 1) * self.t_max]
    }

    pub fn label_row(&self, b: usize) -> &[usize] {
        &self.labels[b * self.t_max..(b + 1) * self.t_max]
    }

    pub fn target_row(&self, b: usize) -> &[f64] {
        &self.targets[b * self.t_max..(b + 1) * self.t_max]
    }

    /// Joints of item `b` over its first `frames` frames as `frames x N x 3`.
    pub fn joints_prefix(&self, b: usize, frames: usize) -> Tensor {
        let n = self.joint_count;
        let block = COORDS * n * self.t_max;
        let base = b * block;
        let mut out = Vec::with_capacity(frames * n * COORDS);
        for t in 0..frames {
            for j in 0..n {
                for c in 0..COORDS {
                    out.push(self.joints[base + (c * n + j) * self.t_max + t]);
                }
            }
        }
        Tensor::new(&[frames, n, COORDS], out)
    }

    /// Real frames of item `b`.
    pub fn unpad(&self, b: usize) -> SkeletonSequence {
        let t = self.lengths[b];
        SkeletonSequence {
            id: self.ids[b].clone(),
            fps: 0.0,
            joint_count: self.joint_count,
            joints: self.joints_prefix(b, t).into_data(),
            labels: self.label_row(b)[..t].to_vec(),
            reba_raw: Vec::new(),
            reba_smooth: self.target_row(b)[..t].to_vec(),
        }
    }
}

/// Right-pads every sequence to `t_max` frames.
///
/// Panics when a sequence is longer than `t_max` or joint counts differ.
pub fn pad_and_mask(sequences: &[&SkeletonSequence], t_max: usize, ignore_label: usize) -> PaddedBatch {
    let n = sequences.first().map_or(0, |s| s.joint_count);
    let b = sequences.len();
    let mut batch = PaddedBatch {
        t_max,
        joint_count: n,
        joints: vec![PAD_VALUE; b * COORDS * n * t_max],
        labels: vec![ignore_label; b * t_max],
        targets: vec![PAD_VALUE; b * t_max],
        mask: vec![false; b * t_max],
        lengths: Vec::with_capacity(b),
        ignore_label,
        ids: Vec::with_capacity(b),
    };
    for (i, s) in sequences.iter().enumerate() {
        let t = s.frames();
        assert!(t <= t_max, "sequence {} has {t} frames, above T_max {t_max}", s.id);
        assert_eq!(s.joint_count, n, "joint counts differ within a batch");
        let base = i * COORDS * n * t_max;
        for f in 0..t {
            let frame = s.frame(f);
            for j in 0..n {
                for c in 0..COORDS {
                    batch.joints[base + (c * n + j) * t_max + f] = frame[j * COORDS + c];
                }
            }
            batch.labels[i * t_max + f] = s.labels[f];
            batch.targets[i * t_max + f] = s.reba_smooth[f];
            batch.mask[i * t_max + f] = true;
        }
        batch.lengths.push(t);
        batch.ids.push(s.id.clone());
    }
    batch
}

/// Seeded shuffle of `0..count` split into `train` and the rest.
pub fn random_split(count: usize, train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = train.min(count);
    let mut tr = idx[..train].to_vec();
    let mut va = idx[train..].to_vec();
    tr.sort_unstable();
    va.sort_unstable();
    (tr, va)
}

/// Training share used when a corpus has no split: 15 of every 20 videos.
pub fn default_train_count(count: usize) -> usize {
    (count * 15).div_ceil(20).min(count.saturating_sub(1)).max(1.min(count))
}
