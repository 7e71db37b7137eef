//! Criterion benchmarks for the spectral pipeline live in `benches/`.
