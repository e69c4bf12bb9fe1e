//! Criterion benchmarks for `skillfb` live in `benches/`.
