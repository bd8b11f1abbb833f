//! Criterion benchmarks for the kernels and the full network; see `benches/`.
