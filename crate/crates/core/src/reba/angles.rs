//! Joint angles from one frame of 3-D joint positions.
//!
//! Body axes: `up` is the gravity-up direction, `lateral` points from the
//! right hip to the left hip (made orthogonal to `up`), and
//! `forward = lateral x up`. Sagittal angles are measured in the
//! forward/up plane, lateral angles in the lateral/up plane.
//!
//! * trunk flexion: sagittal angle of pelvis->neck from `up`. Side bend when
//!   its lateral angle exceeds 10°, twist when the shoulder line and hip line
//!   differ by more than 10° about `up`.
//! * neck flexion: sagittal angle of neck->head minus trunk flexion; side
//!   bend on a 10° lateral difference. A single head point carries no axial
//!   rotation, so neck twist is never set.
//! * knees: angle between thigh and shank, the larger leg is kept. Support is
//!   bilateral when the ankles are within 10 cm of the same height.
//! * upper arm: sagittal angle of shoulder->elbow from straight down, plus
//!   trunk flexion so it is relative to the trunk. Abducted above 30° of
//!   outward lateral angle; shoulder raised when it sits more than 2 cm above
//!   the neck along the trunk axis.
//! * lower arm: angle between upper arm and forearm.
//! * wrist: no hand joint, so flexion 0 and no deviation.
//!
//! Both arms are measured and the one with the higher Table B score is kept.

use super::{lower_arm_score, tables, upper_arm_score, wrist_score, ArmAngles, JointAngles};
use crate::graph::SkeletonTopology;

const MIN_SEGMENT: f64 = 1e-6;
const SIDE_BEND_DEG: f64 = 10.0;
const TWIST_DEG: f64 = 10.0;
const ABDUCTION_DEG: f64 = 30.0;
const SHOULDER_RAISE_M: f64 = 0.02;
const SUPPORT_HEIGHT_M: f64 = 0.10;

type V3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AngleError {
    #[error("degenerate frame: joints {0} and {1} coincide")]
    Degenerate(String, String),
    #[error("topology lacks joint {0:?} needed for angle extraction")]
    MissingJoint(&'static str),
    #[error("frame holds {got} values, expected {expected}")]
    FrameSize { got: usize, expected: usize },
    #[error("non-finite coordinate in frame")]
    NonFinite,
}

/// Gravity-up direction of the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyAxes {
    pub up: V3,
}

impl Default for BodyAxes {
    fn default() -> Self {
        Self { up: [0.0, 1.0, 0.0] }
    }
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: V3) -> V3 {
    scale(a, 1.0 / norm(a))
}

fn angle_between(a: V3, b: V3) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos().to_degrees()
}

struct Joints {
    pelvis: usize,
    neck: usize,
    head: usize,
    shoulder: [usize; 2],
    elbow: [usize; 2],
    wrist: [usize; 2],
    hip: [usize; 2],
    knee: [usize; 2],
    ankle: [usize; 2],
}

impl Joints {
    fn find(topo: &SkeletonTopology) -> Result<Self, AngleError> {
        let j = |name: &'static str| topo.joint_index(name).ok_or(AngleError::MissingJoint(name));
        let pair = |l: &'static str, r: &'static str| -> Result<[usize; 2], AngleError> { Ok([j(l)?, j(r)?]) };
        Ok(Self {
            pelvis: j("pelvis")?,
            neck: j("neck")?,
            head: j("head")?,
            shoulder: pair("l_shoulder", "r_shoulder")?,
            elbow: pair("l_elbow", "r_elbow")?,
            wrist: pair("l_wrist", "r_wrist")?,
            hip: pair("l_hip", "r_hip")?,
            knee: pair("l_knee", "r_knee")?,
            ankle: pair("l_ankle", "r_ankle")?,
        })
    }
}

/// Extracts REBA angles from `frame`, joint-major `x, y, z` triples in the
/// topology's joint order.
pub fn extract_angles(frame: &[f64], topology: &SkeletonTopology, axes: &BodyAxes) -> Result<JointAngles, AngleError> {
    let n = topology.joint_count();
    if frame.len() != n * 3 {
        return Err(AngleError::FrameSize {
            got: frame.len(),
            expected: n * 3,
        });
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(AngleError::NonFinite);
    }
    let ids = Joints::find(topology)?;
    let p = |i: usize| -> V3 { [frame[3 * i], frame[3 * i + 1], frame[3 * i + 2]] };
    let names = topology.joints();
    let segment = |a: usize, b: usize| -> Result<V3, AngleError> {
        let v = sub(p(b), p(a));
        if norm(v) <= MIN_SEGMENT {
            Err(AngleError::Degenerate(names[a].clone(), names[b].clone()))
        } else {
            Ok(v)
        }
    };
    for &(a, b) in topology.edges() {
        segment(a, b)?;
    }

    let up = unit(axes.up);
    let hip_line = segment(ids.hip[1], ids.hip[0])?;
    let lateral_raw = sub(hip_line, scale(up, dot(hip_line, up)));
    if norm(lateral_raw) <= MIN_SEGMENT {
        return Err(AngleError::Degenerate(names[ids.hip[1]].clone(), names[ids.hip[0]].clone()));
    }
    let lateral = unit(lateral_raw);
    let forward = cross(lateral, up);
    let sagittal = |v: V3| dot(v, forward).atan2(dot(v, up)).to_degrees();
    let side = |v: V3| dot(v, lateral).atan2(dot(v, up)).to_degrees();

    let spine = segment(ids.pelvis, ids.neck)?;
    let trunk_flexion = sagittal(spine);
    let trunk_side = side(spine);
    let shoulder_line = segment(ids.shoulder[1], ids.shoulder[0])?;
    let horizontal = |v: V3| sub(v, scale(up, dot(v, up)));
    let sh = horizontal(shoulder_line);
    let trunk_twisted = norm(sh) > MIN_SEGMENT && angle_between(sh, lateral) > TWIST_DEG;

    let head = segment(ids.neck, ids.head)?;
    let neck_flexion = sagittal(head) - trunk_flexion;
    let neck_side_bent = (side(head) - trunk_side).abs() > SIDE_BEND_DEG;

    let mut knee_flexion: f64 = 0.0;
    for s in 0..2 {
        let thigh = segment(ids.hip[s], ids.knee[s])?;
        let shank = segment(ids.knee[s], ids.ankle[s])?;
        knee_flexion = knee_flexion.max(angle_between(thigh, shank));
    }
    let bilateral_support = (dot(p(ids.ankle[0]), up) - dot(p(ids.ankle[1]), up)).abs() <= SUPPORT_HEIGHT_M;

    let trunk_axis = unit(spine);
    let mut best: Option<(u8, ArmAngles)> = None;
    for s in 0..2 {
        let upper = segment(ids.shoulder[s], ids.elbow[s])?;
        let fore = segment(ids.elbow[s], ids.wrist[s])?;
        let down = scale(up, -1.0);
        let outward = if s == 0 { lateral } else { scale(lateral, -1.0) };
        let arm = ArmAngles {
            upper_arm_flexion: dot(upper, forward).atan2(dot(upper, down)).to_degrees() + trunk_flexion,
            abducted: dot(upper, outward).atan2(dot(upper, down)).to_degrees() > ABDUCTION_DEG,
            shoulder_raised: dot(sub(p(ids.shoulder[s]), p(ids.neck)), trunk_axis) > SHOULDER_RAISE_M,
            supported: false,
            lower_arm_flexion: angle_between(upper, fore),
            wrist_flexion: 0.0,
            wrist_deviated: false,
        };
        let score = tables::table_b(upper_arm_score(&arm), lower_arm_score(&arm), wrist_score(&arm));
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, arm));
        }
    }

    Ok(JointAngles {
        trunk_flexion,
        trunk_twisted,
        trunk_side_bent: trunk_side.abs() > SIDE_BEND_DEG,
        neck_flexion: wrap(neck_flexion),
        neck_twisted: false,
        neck_side_bent,
        knee_flexion,
        bilateral_support,
        arm: ArmAngles {
            upper_arm_flexion: wrap(best.map(|b| b.1.upper_arm_flexion).unwrap_or(0.0)),
            ..best.map(|b| b.1).unwrap_or_default()
        },
    })
}

/// Maps an angle into `[-180, 180]`.
fn wrap(deg: f64) -> f64 {
    let r = (deg + 180.0).rem_euclid(360.0) - 180.0;
    if r == -180.0 && deg > 0.0 {
        180.0
    } else {
        r
    }
}
