//! Criterion benchmarks for polycl-core live in `benches/`.
