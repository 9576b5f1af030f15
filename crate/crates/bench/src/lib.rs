//! Criterion benchmarks for the compute kernels and network steps; see
//! `benches/kernels.rs`.
