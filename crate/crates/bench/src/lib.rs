//! Criterion benchmarks for the training kernels live under `benches/`.
