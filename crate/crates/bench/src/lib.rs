//! Criterion benchmarks for the detection hot paths live in `benches/`.
