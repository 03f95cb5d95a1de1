//! Workload drivers for the end-to-end checks in `tests/acceptance.rs`.

pub mod stress;
pub mod wire;
