//! REBA ergonomic risk scoring from skeleton joint angles.
//!
//! Angles are in degrees. Flexion is positive, extension negative. Component
//! bands follow the standard worksheet, with a ±5° neutral tolerance on the
//! trunk and on neck extension so measurement noise around an upright pose
//! does not flip the score.

mod angles;
mod smooth;
pub mod tables;

use serde::{Deserialize, Serialize};

pub use angles::{extract_angles, AngleError, BodyAxes};
pub use smooth::{smooth_scores, DEFAULT_SMOOTHING};

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 15;

/// Neutral tolerance around upright for trunk and neck, degrees.
const NEUTRAL_BAND: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmAngles {
    /// Upper arm relative to the trunk; negative is extension behind it.
    pub upper_arm_flexion: f64,
    pub shoulder_raised: bool,
    pub abducted: bool,
    /// Arm supported or person leaning (worksheet -1).
    pub supported: bool,
    /// Elbow flexion; 0 is a straight arm.
    pub lower_arm_flexion: f64,
    pub wrist_flexion: f64,
    pub wrist_deviated: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointAngles {
    pub trunk_flexion: f64,
    pub trunk_twisted: bool,
    pub trunk_side_bent: bool,
    pub neck_flexion: f64,
    pub neck_twisted: bool,
    pub neck_side_bent: bool,
    /// Larger knee flexion of the two legs.
    pub knee_flexion: f64,
    pub bilateral_support: bool,
    /// The scored (worse) arm.
    pub arm: ArmAngles,
}

impl JointAngles {
    /// Upright standing pose with arms hanging and elbows at 80°.
    pub fn neutral() -> Self {
        Self {
            bilateral_support: true,
            arm: ArmAngles {
                lower_arm_flexion: 80.0,
                ..ArmAngles::default()
            },
            ..Self::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        [
            self.trunk_flexion,
            self.neck_flexion,
            self.knee_flexion,
            self.arm.upper_arm_flexion,
            self.arm.lower_arm_flexion,
            self.arm.wrist_flexion,
        ]
        .iter()
        .all(|a| a.is_finite() && a.abs() <= 180.0)
    }
}

/// Task context that the skeleton cannot show.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RebaContext {
    /// 0: under 5 kg, 1: 5 to 10 kg, 2: over 10 kg.
    pub load: u8,
    pub shock: bool,
    /// 0 good, 1 fair, 2 poor, 3 unacceptable.
    pub coupling: u8,
    pub static_posture: bool,
    pub repeated_small_range: bool,
    pub rapid_large_change: bool,
}

impl RebaContext {
    pub fn is_valid(&self) -> bool {
        self.load <= 2 && self.coupling <= 3
    }

    pub fn activity(&self) -> u8 {
        [self.static_posture, self.repeated_small_range, self.rapid_large_change]
            .iter()
            .filter(|f| **f)
            .count() as u8
    }
}

/// Per-region worksheet scores before the table lookups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentScores {
    pub trunk: u8,
    pub neck: u8,
    pub legs: u8,
    pub upper_arm: u8,
    pub lower_arm: u8,
    pub wrist: u8,
}

pub fn trunk_score(a: &JointAngles) -> u8 {
    let f = a.trunk_flexion;
    let base = if f.abs() <= NEUTRAL_BAND {
        1
    } else if (-20.0..=20.0).contains(&f) {
        2
    } else if f <= 60.0 {
        3
    } else {
        4
    };
    base + u8::from(a.trunk_twisted || a.trunk_side_bent)
}

pub fn neck_score(a: &JointAngles) -> u8 {
    let base = if (-NEUTRAL_BAND..=20.0).contains(&a.neck_flexion) { 1 } else { 2 };
    base + u8::from(a.neck_twisted || a.neck_side_bent)
}

pub fn legs_score(a: &JointAngles) -> u8 {
    let base = if a.bilateral_support { 1 } else { 2 };
    let k = a.knee_flexion;
    base + if k > 60.0 {
        2
    } else if k >= 30.0 {
        1
    } else {
        0
    }
}

pub fn upper_arm_score(a: &ArmAngles) -> u8 {
    let f = a.upper_arm_flexion;
    let base: u8 = if (-20.0..=20.0).contains(&f) {
        1
    } else if f < -20.0 || f <= 45.0 {
        2
    } else if f <= 90.0 {
        3
    } else {
        4
    };
    let raised = base + u8::from(a.abducted) + u8::from(a.shoulder_raised);
    raised.saturating_sub(u8::from(a.supported)).max(1)
}

pub fn lower_arm_score(a: &ArmAngles) -> u8 {
    if (60.0..=100.0).contains(&a.lower_arm_flexion) {
        1
    } else {
        2
    }
}

pub fn wrist_score(a: &ArmAngles) -> u8 {
    let base = if a.wrist_flexion.abs() <= 15.0 { 1 } else { 2 };
    base + u8::from(a.wrist_deviated)
}

pub fn component_scores(a: &JointAngles) -> ComponentScores {
    ComponentScores {
        trunk: trunk_score(a),
        neck: neck_score(a),
        legs: legs_score(a),
        upper_arm: upper_arm_score(&a.arm),
        lower_arm: lower_arm_score(&a.arm),
        wrist: wrist_score(&a.arm),
    }
}

/// Table A plus load.
pub fn score_a(c: &ComponentScores, ctx: &RebaContext) -> u8 {
    tables::table_a(c.trunk, c.neck, c.legs) + ctx.load.min(2) + u8::from(ctx.shock)
}

/// Table B plus coupling.
pub fn score_b(c: &ComponentScores, ctx: &RebaContext) -> u8 {
    tables::table_b(c.upper_arm, c.lower_arm, c.wrist) + ctx.coupling.min(3)
}

/// Final score from component scores, in `1..=15`.
pub fn score_components(c: &ComponentScores, ctx: &RebaContext) -> u8 {
    let c_score = tables::table_c(score_a(c, ctx), score_b(c, ctx));
    (c_score + ctx.activity()).clamp(MIN_SCORE, MAX_SCORE)
}

pub fn reba_score(angles: &JointAngles, ctx: &RebaContext) -> u8 {
    score_components(&component_scores(angles), ctx)
}
