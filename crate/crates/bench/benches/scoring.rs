use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ergoseg::metrics::{f1_overlap, mean_average_precision, segmental_edit_score, spearman};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reba(c: &mut Criterion) {
    let data = ergoseg_bench::dataset(5, 2000, 1);
    let contexts: Vec<_> = data.manifest.classes.iter().map(|c| c.context).collect();
    let seq = data.sequences[0].clone();
    c.bench_function("reba/2000 frames", |b| {
        b.iter(|| {
            let mut s = seq.clone();
            s.compute_reba(&data.topology, &contexts, 1.0).unwrap();
            black_box(s.reba_smooth);
        })
    });
}

fn labels(rng: &mut ChaCha8Rng, frames: usize, classes: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(frames);
    while out.len() < frames {
        let len = rng.gen_range(20..200).min(frames - out.len());
        let label = rng.gen_range(0..classes);
        out.extend(std::iter::repeat(label).take(len));
    }
    out
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = 5000;
    let classes = 8;
    let gt = labels(&mut rng, frames, classes);
    let pred = labels(&mut rng, frames, classes);
    let scores: Vec<f64> = (0..frames * classes).map(|_| rng.gen()).collect();
    let a: Vec<f64> = (0..frames).map(|_| rng.gen_range(1.0..15.0)).collect();
    let b: Vec<f64> = (0..frames).map(|_| rng.gen_range(1.0..15.0)).collect();
    c.bench_function("metrics/f1@50", |bench| bench.iter(|| f1_overlap(black_box(&pred), &gt, 0.5)));
    c.bench_function("metrics/edit", |bench| bench.iter(|| segmental_edit_score(black_box(&pred), &gt)));
    c.bench_function("metrics/map", |bench| bench.iter(|| mean_average_precision(black_box(&scores), classes, &gt)));
    c.bench_function("metrics/spearman", |bench| bench.iter(|| spearman(black_box(&a), &b)));
}

criterion_group!(benches, reba, metrics);
criterion_main!(benches);
