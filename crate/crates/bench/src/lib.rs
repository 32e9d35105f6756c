//! Shared fixtures for the benchmarks.

use ergoseg::data::{generate_synthetic, Dataset, SynthConfig};

/// A small synthetic dataset with REBA targets, one video per entry of `frames`.
pub fn dataset(classes: usize, frames: usize, videos: usize) -> Dataset {
    let cfg = SynthConfig {
        classes,
        videos,
        segments_per_video: classes,
        min_frames: frames,
        max_frames: frames,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, 11).into_dataset(None)
}
