//! Benchmark-only crate; see `benches/controller_step.rs`.
