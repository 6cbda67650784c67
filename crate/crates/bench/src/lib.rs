//! Criterion benchmarks for the hotspot kernels; see `benches/`.
