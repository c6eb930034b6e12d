//! Criterion benchmarks of the estimation kernels. See `benches/kernels.rs`.
