//! Latency benchmark harness.
//!
//! One publisher per topic and `S` subscribers per topic, each endpoint in
//! its own participant (a thread in the in-process backend, a process in the
//! shared-memory backend). Publishers send at a fixed rate; three metrics are
//! collected:
//!
//! * `publish`: loan through publish completion, notification included;
//! * `receive`: one receive call that returned at least one entry;
//! * `e2e`: receive-side callback start minus publish start, both read from
//!   `CLOCK_MONOTONIC` (the publish timestamp travels in the payload's first
//!   eight bytes).
//!
//! Percentiles are exact nearest-rank values over samples pooled across
//! iterations and processes.
//!
//! Real-time scheduling is not set up by the harness. For low tail noise run
//! it under `chrt -f 80` and raise `kernel.sched_rt_runtime_us` so the RT
//! throttle does not insert gaps.

pub mod capacity;
pub mod config;
pub mod report;
pub mod run;
pub mod sample;
pub mod shm;
pub mod stats;

pub use config::{Backend, Mode, Sweep, SweepConfig};
pub use run::{run_config, RunResult};
pub use sample::{Coords, LatencySample, Metric};
pub use stats::{percentile, scaling_fit, Axis, Fit, PercentileReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{required} events/s requested, {allowed:.0} allowed at the configured utilization cap")]
    CapacityExceeded { required: f64, allowed: f64 },
    #[error("failed to start actors: {0}")]
    SpawnFailure(String),
    #[error("no samples")]
    EmptySampleSet,
    #[error("quantile must lie strictly between 0 and 1, got {0}")]
    InvalidQuantile(f64),
    #[error("{found} distinct points along the axis, at least {needed} needed")]
    InsufficientPoints { found: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("run failed: {0}")]
    RunFailure(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),
}
