//! Benchmark-only crate; the measured kernels live in `benches/kernels.rs`.
//! Run with `cargo bench -p vhegan-bench`.
