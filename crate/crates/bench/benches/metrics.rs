use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use semtraj_core::evalkit::{average_precision, roc_auc};
use semtraj_core::numerics::seeded_rng;

fn ranking(c: &mut Criterion) {
    let mut rng = seeded_rng(3, 0);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 10 == 0).collect();
    c.bench_function("roc_auc_10k", |b| {
        b.iter(|| roc_auc(black_box(&scores), black_box(&labels)).unwrap())
    });
    c.bench_function("average_precision_10k", |b| {
        b.iter(|| average_precision(black_box(&scores), black_box(&labels)).unwrap())
    });
}

criterion_group!(benches, ranking);
criterion_main!(benches);
