//! Criterion benchmarks for the synthesis and verification paths; see
//! `benches/`.
