//! Criterion benchmarks for the adaptation toolkit; see `benches/`.
