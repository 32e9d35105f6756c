#![allow(dead_code)]

pub mod oracles;

use ergoseg::reba::{ArmAngles, JointAngles, RebaContext};

pub struct PostureFixture {
    pub name: String,
    pub angles: JointAngles,
    pub context: RebaContext,
    pub score_a: u8,
    pub score_b: u8,
    pub score: u8,
}

pub fn reba_fixtures() -> Vec<PostureFixture> {
    let text = include_str!("../fixtures/reba_postures.csv");
    let mut rows = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = rows.next().expect("header").split(',').collect();
    rows.map(|line| {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), header.len(), "row {line:?}");
        let get = |key: &str| -> &str { cells[header.iter().position(|h| *h == key).unwrap_or_else(|| panic!("column {key}"))] };
        let num = |key: &str| -> f64 { get(key).parse().unwrap() };
        let flag = |key: &str| -> bool { get(key) == "1" };
        let int = |key: &str| -> u8 { get(key).parse().unwrap() };
        PostureFixture {
            name: get("name").to_string(),
            angles: JointAngles {
                trunk_flexion: num("trunk"),
                trunk_twisted: flag("trunk_twist"),
                trunk_side_bent: flag("trunk_side"),
                neck_flexion: num("neck"),
                neck_twisted: flag("neck_twist"),
                neck_side_bent: flag("neck_side"),
                knee_flexion: num("knee"),
                bilateral_support: flag("bilateral"),
                arm: ArmAngles {
                    upper_arm_flexion: num("upper_arm"),
                    shoulder_raised: flag("shoulder_raised"),
                    abducted: flag("abducted"),
                    supported: flag("supported"),
                    lower_arm_flexion: num("lower_arm"),
                    wrist_flexion: num("wrist"),
                    wrist_deviated: flag("wrist_dev"),
                },
            },
            context: RebaContext {
                load: int("load"),
                shock: flag("shock"),
                coupling: int("coupling"),
                static_posture: flag("static"),
                repeated_small_range: flag("repeated"),
                rapid_large_change: flag("rapid"),
            },
            score_a: int("score_a"),
            score_b: int("score_b"),
            score: int("score"),
        }
    })
    .collect()
}
