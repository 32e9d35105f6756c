//! Synthetic skeleton videos with posture-regime classes.
//!
//! Every class is a posture regime posed by forward kinematics on the
//! canonical skeleton (y up, facing +z, left toward +x). Segments blend
//! their pose parameters into the next regime over a short window so bone
//! lengths stay fixed. The window sits at the start of the incoming segment,
//! except that an upright segment keeps its frames neutral and the blend
//! happens at the end of the segment before it.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_sequence, ClassInfo, Dataset, Manifest, ManifestVideo, Split};
use super::{default_train_count, random_split, DataError, SkeletonSequence};
use crate::graph::{SkeletonTopology, CANONICAL_JOINTS};
use crate::reba::{RebaContext, DEFAULT_SMOOTHING};

const JOINTS: usize = CANONICAL_JOINTS.len();
const BLEND_FRAMES: usize = 5;
const SWAY_DEG: f64 = 2.0;
const JITTER: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub videos: usize,
    pub segments_per_video: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of coordinate noise in meters.
    pub noise: f64,
    pub fps: f64,
    pub smoothing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            videos: 20,
            segments_per_video: 6,
            min_frames: 120,
            max_frames: 200,
            noise: 0.01,
            fps: 30.0,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

/// Pose parameters in degrees. Index 0 is the left side, 1 the right.
/// Arm angles are relative to the trunk.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub trunk_flexion: f64,
    pub trunk_side: f64,
    pub trunk_twist: f64,
    pub neck_flexion: f64,
    pub arm_flexion: [f64; 2],
    pub arm_abduction: [f64; 2],
    pub elbow: [f64; 2],
    pub hip: [f64; 2],
    pub knee: [f64; 2],
}

impl Pose {
    fn lerp(&self, other: &Pose, w: f64) -> Pose {
        let l = |a: f64, b: f64| a + (b - a) * w;
        let l2 = |a: [f64; 2], b: [f64; 2]| [l(a[0], b[0]), l(a[1], b[1])];
        Pose {
            trunk_flexion: l(self.trunk_flexion, other.trunk_flexion),
            trunk_side: l(self.trunk_side, other.trunk_side),
            trunk_twist: l(self.trunk_twist, other.trunk_twist),
            neck_flexion: l(self.neck_flexion, other.neck_flexion),
            arm_flexion: l2(self.arm_flexion, other.arm_flexion),
            arm_abduction: l2(self.arm_abduction, other.arm_abduction),
            elbow: l2(self.elbow, other.elbow),
            hip: l2(self.hip, other.hip),
            knee: l2(self.knee, other.knee),
        }
    }

    fn scaled(&self, mut f: impl FnMut() -> f64) -> Pose {
        let mut p = *self;
        for v in [&mut p.trunk_flexion, &mut p.trunk_side, &mut p.trunk_twist, &mut p.neck_flexion] {
            *v *= f();
        }
        for pair in [&mut p.arm_flexion, &mut p.arm_abduction, &mut p.elbow, &mut p.hip, &mut p.knee] {
            for v in pair.iter_mut() {
                *v *= f();
            }
        }
        p
    }

    /// Joint positions for a body of scale `s` (1 is about 1.75 m tall),
    /// in canonical joint order with the lower ankle 10 cm above the floor.
    pub fn joints(&self, s: f64) -> Vec<f64> {
        type V = [f64; 3];
        let add = |a: V, b: V| [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
        let mul = |a: V, k: f64| [a[0] * k, a[1] * k, a[2] * k];
        // rotation about x moving +y toward +z, about z moving +y toward +x,
        // about y moving +z toward +x
        let rx = |v: V, deg: f64| {
            let (sn, c) = deg.to_radians().sin_cos();
            [v[0], v[1] * c - v[2] * sn, v[1] * sn + v[2] * c]
        };
        let rz = |v: V, deg: f64| {
            let (sn, c) = deg.to_radians().sin_cos();
            [v[0] * c + v[1] * sn, -v[0] * sn + v[1] * c, v[2]]
        };
        let ry = |v: V, deg: f64| {
            let (sn, c) = deg.to_radians().sin_cos();
            [v[0] * c + v[2] * sn, v[1], -v[0] * sn + v[2] * c]
        };
        let upper = |v: V| rx(rz(ry(v, self.trunk_twist), self.trunk_side), self.trunk_flexion);
        let down = [0.0, -1.0, 0.0];
        let pelvis = [0.0, 0.0, 0.0];
        let neck = upper([0.0, 0.5 * s, 0.0]);
        let head = add(neck, upper(mul(rx([0.0, 1.0, 0.0], self.neck_flexion), 0.2 * s)));
        let mut out: Vec<V> = vec![[0.0; 3]; JOINTS];
        out[0] = pelvis;
        out[1] = neck;
        out[2] = head;
        for (side, sign) in [(0usize, 1.0), (1, -1.0)] {
            let shoulder = upper([0.2 * s * sign, 0.48 * s, 0.0]);
            let arm = |extra: f64| rz(rx(down, -(self.arm_flexion[side] + extra)), -sign * self.arm_abduction[side]);
            let elbow = add(shoulder, upper(mul(arm(0.0), 0.3 * s)));
            let wrist = add(elbow, upper(mul(arm(self.elbow[side]), 0.28 * s)));
            let hip = [0.1 * s * sign, 0.0, 0.0];
            let knee = add(hip, mul(rx(down, -self.hip[side]), 0.45 * s));
            let ankle = add(knee, mul(rx(down, -(self.hip[side] - self.knee[side])), 0.45 * s));
            let base = 3 + 3 * side;
            out[base] = shoulder;
            out[base + 1] = elbow;
            out[base + 2] = wrist;
            out[9 + 3 * side] = hip;
            out[10 + 3 * side] = knee;
            out[11 + 3 * side] = ankle;
        }
        let floor = out[11][1].min(out[14][1]);
        out.iter().flat_map(|p| [p[0], p[1] - floor + 0.1, p[2]]).collect()
    }
}

const REGIME_NAMES: [&str; 5] = ["upright", "bending", "overhead", "squatting", "reaching"];

fn regime(k: usize) -> (Pose, RebaContext) {
    let mut pose = Pose {
        elbow: [80.0, 80.0],
        ..Pose::default()
    };
    let mut ctx = RebaContext::default();
    match k {
        0 => {}
        1 => {
            pose.trunk_flexion = 70.0;
            pose.neck_flexion = 28.0;
            pose.arm_flexion = [70.0, 70.0];
            pose.elbow = [30.0, 30.0];
            pose.hip = [10.0, 10.0];
            pose.knee = [20.0, 20.0];
            ctx.load = 1;
        }
        2 => {
            pose.neck_flexion = -18.0;
            pose.arm_flexion = [150.0, 150.0];
            pose.elbow = [40.0, 40.0];
            ctx.coupling = 1;
            ctx.static_posture = true;
        }
        3 => {
            pose.trunk_flexion = 35.0;
            pose.neck_flexion = 10.0;
            pose.arm_flexion = [45.0, 45.0];
            pose.hip = [85.0, 85.0];
            pose.knee = [100.0, 100.0];
            ctx.repeated_small_range = true;
        }
        _ => {
            pose.trunk_flexion = 15.0;
            pose.trunk_side = 20.0;
            pose.trunk_twist = 25.0;
            pose.neck_flexion = 12.0;
            pose.arm_flexion = [10.0, 30.0];
            pose.arm_abduction = [0.0, 70.0];
            pose.elbow = [80.0, 20.0];
            pose.hip = [60.0, 0.0];
            pose.knee = [90.0, 0.0];
            ctx.coupling = 2;
            ctx.rapid_large_change = true;
        }
    }
    (pose, ctx)
}

/// Pose, REBA context and name of class `k`. Classes past the five base
/// regimes reuse one with shifted angles.
pub fn pose_for_class(k: usize) -> (Pose, ClassInfo) {
    let base = k % REGIME_NAMES.len();
    let round = k / REGIME_NAMES.len();
    let (mut pose, mut ctx) = regime(base);
    let name = if round == 0 {
        REGIME_NAMES[base].to_string()
    } else {
        let shift = 12.0 * round as f64;
        pose.trunk_flexion += shift;
        pose.arm_flexion = pose.arm_flexion.map(|a| a + shift);
        pose.knee = pose.knee.map(|a| a + shift / 2.0);
        pose.hip = pose.hip.map(|a| a + shift / 4.0);
        ctx.load = ((usize::from(ctx.load) + round) % 3) as u8;
        format!("{}_{}", REGIME_NAMES[base], round + 1)
    };
    (pose, ClassInfo { name, context: ctx })
}

fn segment_classes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cfg.classes).collect();
    order.shuffle(rng);
    while order.len() < cfg.segments_per_video {
        let c = rng.gen_range(0..cfg.classes);
        let positions: Vec<usize> = (0..=order.len())
            .filter(|&p| (p == 0 || order[p - 1] != c) && (p == order.len() || order[p] != c))
            .collect();
        if let Some(&p) = positions.choose(rng) {
            order.insert(p, c);
        }
    }
    order
}

fn segment_lengths(total: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let min = (total / (3 * count)).max(1);
    let weights: Vec<f64> = (0..count).map(|_| rng.gen_range(0.5..1.5)).collect();
    let sum: f64 = weights.iter().sum();
    let spare = total - min * count;
    let mut lens: Vec<usize> = weights.iter().map(|w| min + (spare as f64 * w / sum) as usize).collect();
    let used: usize = lens.iter().sum();
    *lens.last_mut().unwrap() += total - used;
    lens
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Generated videos with their class table.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub classes: Vec<ClassInfo>,
    pub sequences: Vec<SkeletonSequence>,
    pub smoothing: f64,
}

/// Generates `config.videos` sequences; the same seed gives identical data.
///
/// Panics when the config asks for fewer segments than classes or an empty
/// frame range.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> SyntheticData {
    assert!(config.classes >= 1 && config.segments_per_video >= config.classes);
    assert!(config.min_frames >= config.segments_per_video && config.min_frames <= config.max_frames);
    let topology = SkeletonTopology::canonical();
    let (poses, classes): (Vec<Pose>, Vec<ClassInfo>) = (0..config.classes).map(pose_for_class).unzip();
    let contexts: Vec<RebaContext> = classes.iter().map(|c| c.context).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise.max(0.0)).expect("finite noise level");
    let mut sequences = Vec::with_capacity(config.videos);
    for v in 0..config.videos {
        let frames = rng.gen_range(config.min_frames..=config.max_frames);
        let seg_classes = segment_classes(config, &mut rng);
        let lens = segment_lengths(frames, seg_classes.len(), &mut rng);
        let scale = rng.gen_range(0.9..1.1);
        let seg_poses: Vec<Pose> = seg_classes
            .iter()
            .map(|&c| poses[c].scaled(|| 1.0 + rng.gen_range(-JITTER..JITTER)))
            .collect();
        let sway: Vec<(f64, f64)> = seg_classes
            .iter()
            .map(|_| (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(40.0..80.0)))
            .collect();
        let mut labels = Vec::with_capacity(frames);
        let mut joints = Vec::with_capacity(frames * JOINTS * 3);
        let mut start = 0;
        for (s, &len) in lens.iter().enumerate() {
            let blend = BLEND_FRAMES.min(len / 3);
            for i in 0..len {
                let mut pose = seg_poses[s];
                if s > 0 && seg_classes[s] != 0 && i < blend {
                    pose = seg_poses[s - 1].lerp(&pose, smoothstep((i + 1) as f64 / (blend + 1) as f64));
                }
                if s + 1 < lens.len() && seg_classes[s + 1] == 0 {
                    let next_blend = BLEND_FRAMES.min(len / 3);
                    if i + next_blend >= len {
                        let k = i + next_blend + 1 - len;
                        pose = pose.lerp(&seg_poses[s + 1], smoothstep(k as f64 / (next_blend + 1) as f64));
                    }
                }
                let (phase, period) = sway[s];
                pose.trunk_flexion += SWAY_DEG * (phase + std::f64::consts::TAU * (start + i) as f64 / period).sin();
                let mut frame = pose.joints(scale);
                if config.noise > 0.0 {
                    for x in frame.iter_mut() {
                        *x += noise.sample(&mut rng);
                    }
                }
                joints.extend_from_slice(&frame);
                labels.push(seg_classes[s]);
            }
            start += len;
        }
        let mut seq = SkeletonSequence {
            id: format!("synth_{v:03}"),
            fps: config.fps,
            joint_count: JOINTS,
            joints,
            labels,
            reba_raw: Vec::new(),
            reba_smooth: Vec::new(),
        };
        seq.compute_reba(&topology, &contexts, config.smoothing)
            .expect("synthetic poses are never degenerate");
        sequences.push(seq);
    }
    SyntheticData {
        classes,
        sequences,
        smoothing: config.smoothing,
    }
}

impl SyntheticData {
    /// In-memory dataset on the canonical skeleton. With a split seed the
    /// videos get a seeded train/val split, otherwise all are training.
    pub fn into_dataset(self, split_seed: Option<u64>) -> Dataset {
        let n = self.sequences.len();
        let train = match split_seed {
            Some(seed) => random_split(n, default_train_count(n), seed).0,
            None => (0..n).collect(),
        };
        let videos = self
            .sequences
            .iter()
            .enumerate()
            .map(|(i, s)| ManifestVideo {
                path: PathBuf::from("videos").join(format!("{}.csv", s.id)),
                split: if train.contains(&i) { Split::Train } else { Split::Val },
            })
            .collect();
        Dataset {
            root: PathBuf::new(),
            manifest: Manifest {
                smoothing: self.smoothing,
                topology_file: None,
                classes: self.classes,
                videos,
            },
            topology: SkeletonTopology::canonical(),
            sequences: self.sequences,
        }
    }
}

/// Writes the videos under `dir/videos/` and a manifest at
/// `dir/manifest.txt` with a seeded 15-of-20 style train/val split.
pub fn write_synthetic(dir: &Path, data: &SyntheticData, split_seed: u64) -> Result<PathBuf, DataError> {
    let hash = SkeletonTopology::canonical().hash();
    let n = data.sequences.len();
    let (train, _) = random_split(n, default_train_count(n), split_seed);
    let mut videos = Vec::with_capacity(n);
    for (i, seq) in data.sequences.iter().enumerate() {
        let rel = PathBuf::from("videos").join(format!("{}.csv", seq.id));
        write_sequence(&dir.join(&rel), seq, &hash, Some(data.smoothing))?;
        let split = if train.contains(&i) { Split::Train } else { Split::Val };
        videos.push(ManifestVideo { path: rel, split });
    }
    let manifest = Manifest {
        smoothing: data.smoothing,
        topology_file: None,
        classes: data.classes.clone(),
        videos,
    };
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest.to_text()).map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}
