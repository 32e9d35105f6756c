//! The three REBA worksheet lookup tables.

/// Table A indexed `[neck - 1][trunk - 1][legs - 1]`.
const TABLE_A: [[[u8; 4]; 5]; 3] = [
    [[1, 2, 3, 4], [2, 3, 4, 5], [2, 4, 5, 6], [3, 5, 6, 7], [4, 6, 7, 8]],
    [[1, 2, 3, 4], [3, 4, 5, 6], [4, 5, 6, 7], [5, 6, 7, 8], [6, 7, 8, 9]],
    [[3, 3, 5, 6], [4, 5, 6, 7], [5, 6, 7, 8], [6, 7, 8, 9], [7, 8, 9, 9]],
];

/// Table B indexed `[lower_arm - 1][upper_arm - 1][wrist - 1]`.
const TABLE_B: [[[u8; 3]; 6]; 2] = [
    [[1, 2, 2], [1, 2, 3], [3, 4, 5], [4, 5, 5], [6, 7, 8], [7, 8, 8]],
    [[1, 2, 3], [2, 3, 4], [4, 5, 5], [5, 6, 7], [7, 8, 8], [8, 9, 9]],
];

/// Table C indexed `[score_a - 1][score_b - 1]`.
const TABLE_C: [[u8; 12]; 12] = [
    [1, 1, 1, 2, 3, 3, 4, 5, 6, 7, 7, 7],
    [1, 2, 2, 3, 4, 4, 5, 6, 6, 7, 7, 8],
    [2, 3, 3, 3, 4, 5, 6, 7, 7, 8, 8, 8],
    [3, 4, 4, 4, 5, 6, 7, 8, 8, 9, 9, 9],
    [4, 4, 4, 5, 6, 7, 8, 8, 9, 9, 9, 9],
    [6, 6, 6, 7, 8, 8, 9, 9, 10, 10, 10, 10],
    [7, 7, 7, 8, 9, 9, 9, 10, 10, 11, 11, 11],
    [8, 8, 8, 9, 10, 10, 10, 10, 10, 11, 11, 11],
    [9, 9, 9, 10, 10, 10, 11, 11, 11, 12, 12, 12],
    [10, 10, 10, 11, 11, 11, 11, 12, 12, 12, 12, 12],
    [11, 11, 11, 11, 12, 12, 12, 12, 12, 12, 12, 12],
    [12, 12, 12, 12, 12, 12, 12, 12, 12, 12, 12, 12],
];

pub const TRUNK_MAX: u8 = 5;
pub const NECK_MAX: u8 = 3;
pub const LEGS_MAX: u8 = 4;
pub const UPPER_ARM_MAX: u8 = 6;
pub const LOWER_ARM_MAX: u8 = 2;
pub const WRIST_MAX: u8 = 3;
pub const SIDE_MAX: u8 = 12;

/// Panics on out-of-range component scores.
pub fn table_a(trunk: u8, neck: u8, legs: u8) -> u8 {
    assert!((1..=TRUNK_MAX).contains(&trunk), "trunk score {trunk}");
    assert!((1..=NECK_MAX).contains(&neck), "neck score {neck}");
    assert!((1..=LEGS_MAX).contains(&legs), "legs score {legs}");
    TABLE_A[neck as usize - 1][trunk as usize - 1][legs as usize - 1]
}

pub fn table_b(upper_arm: u8, lower_arm: u8, wrist: u8) -> u8 {
    assert!((1..=UPPER_ARM_MAX).contains(&upper_arm), "upper arm score {upper_arm}");
    assert!((1..=LOWER_ARM_MAX).contains(&lower_arm), "lower arm score {lower_arm}");
    assert!((1..=WRIST_MAX).contains(&wrist), "wrist score {wrist}");
    TABLE_B[lower_arm as usize - 1][upper_arm as usize - 1][wrist as usize - 1]
}

pub fn table_c(score_a: u8, score_b: u8) -> u8 {
    assert!((1..=SIDE_MAX).contains(&score_a), "score A {score_a}");
    assert!((1..=SIDE_MAX).contains(&score_b), "score B {score_b}");
    TABLE_C[score_a as usize - 1][score_b as usize - 1]
}
