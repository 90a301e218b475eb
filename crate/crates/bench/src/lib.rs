//! Benchmark-only crate. See `benches/pipelines.rs`.
