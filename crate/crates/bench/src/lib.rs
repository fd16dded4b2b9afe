//! Criterion benchmarks for semtraj; see `benches/`.
