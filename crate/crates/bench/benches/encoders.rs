use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use semtraj_core::encoder::{Arch, Encoder, EncoderConfig, Packed};
use semtraj_core::numerics::{seeded_rng, Graph, ParamStore, Tensor};

const DAYS: usize = 128;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode_batch");
    for arch in Arch::ALL {
        let cfg = EncoderConfig {
            arch,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::build(cfg, &mut store, &mut seeded_rng(7, 0)).unwrap();
        let mut rng = seeded_rng(7, 1);
        let lens: Vec<usize> = (0..DAYS).map(|i| 1 + i % cfg.cutoff_len).collect();
        let rows: usize = lens.iter().sum();
        let x = Tensor::matrix(rows, cfg.dim, (0..rows * cfg.dim).map(|_| rng.normal()).collect()).unwrap();
        let packed = Packed::new(lens).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(arch), &x, |b, x| {
            b.iter(|| {
                let mut g = Graph::new();
                let v = g.constant(x.clone());
                let z = enc.encode(&mut g, &store, v, &packed).unwrap();
                black_box(g.value(z).data()[0])
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
