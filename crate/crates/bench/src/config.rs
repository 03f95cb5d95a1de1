use std::fmt;
use std::time::Duration;

use pubsub_core::notify::{DeliveryMode, DEFAULT_POLL_INTERVAL};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sweep {
    /// Topic count varies, two subscribers per topic.
    A,
    /// Fan-out varies, ten topics.
    B,
    /// Topic count crossed with fan-out.
    C,
    Custom,
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sweep::A => "A",
            Sweep::B => "B",
            Sweep::C => "C",
            Sweep::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backend {
    /// Threads sharing one broker and in-process arenas.
    InProc,
    /// One OS process per endpoint, broker reached over the socket protocol,
    /// payloads in shared memory.
    Shm,
}

impl Backend {
    pub fn label(&self) -> &'static str {
        match self {
            Backend::InProc => "inproc",
            Backend::Shm => "shm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Event,
    Poll { interval: Duration },
}

impl Mode {
    pub fn poll_default() -> Self {
        Mode::Poll {
            interval: DEFAULT_POLL_INTERVAL,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Event => "event",
            Mode::Poll { .. } => "poll",
        }
    }

    pub fn delivery(&self) -> Result<DeliveryMode, BenchError> {
        match *self {
            Mode::Event => Ok(DeliveryMode::EventDriven),
            Mode::Poll { interval } => {
                DeliveryMode::polling(interval).map_err(|e| BenchError::InvalidConfig(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub sweep: Sweep,
    pub topics: u32,
    pub subscribers_per_topic: u32,
    pub rate_hz: f64,
    pub duration: Duration,
    pub warmup: Duration,
    pub iterations: u32,
    pub mode: Mode,
    pub backend: Backend,
    /// Largest fraction of the measured host capacity a run may request.
    pub utilization_cap: f64,
    pub payload_bytes: usize,
    /// Keep-last depth of every endpoint. Large enough that a briefly
    /// delayed subscriber never loses entries to eviction.
    pub depth: u32,
}

pub const DEFAULT_RATE_HZ: f64 = 100.0;
pub const DEFAULT_UTILIZATION_CAP: f64 = 0.6;
pub const DEFAULT_PAYLOAD_BYTES: usize = 1024;
pub const DEFAULT_DEPTH: u32 = 64;

impl SweepConfig {
    /// Desk-scale defaults: 3 s measured after 1 s warmup, 3 iterations.
    pub fn new(sweep: Sweep, topics: u32, subscribers_per_topic: u32) -> Self {
        Self {
            sweep,
            topics,
            subscribers_per_topic,
            rate_hz: DEFAULT_RATE_HZ,
            duration: Duration::from_secs(3),
            warmup: Duration::from_secs(1),
            iterations: 3,
            mode: Mode::Event,
            backend: Backend::InProc,
            utilization_cap: DEFAULT_UTILIZATION_CAP,
            payload_bytes: DEFAULT_PAYLOAD_BYTES,
            depth: DEFAULT_DEPTH,
        }
    }

    /// Deliveries per second requested: `T * S * R`.
    pub fn events_per_sec(&self) -> f64 {
        self.topics as f64 * self.subscribers_per_topic as f64 * self.rate_hz
    }

    /// Messages each publisher sends per iteration, warmup included.
    pub fn publishes_per_topic(&self) -> u64 {
        ((self.warmup + self.duration).as_secs_f64() * self.rate_hz).round() as u64
    }

    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.rate_hz)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.to_string()));
        if self.topics == 0 || self.subscribers_per_topic == 0 || self.iterations == 0 {
            return bad("topics, subscribers per topic and iterations must be positive");
        }
        if !(self.rate_hz.is_finite() && self.rate_hz > 0.0) {
            return bad("rate must be positive");
        }
        if !(self.utilization_cap > 0.0 && self.utilization_cap <= 1.0) {
            return bad("utilization cap must lie in (0, 1]");
        }
        if self.payload_bytes < 8 {
            return bad("payload must hold the 8-byte timestamp");
        }
        if self.depth == 0 {
            return bad("depth must be positive");
        }
        if self.duration.is_zero() {
            return bad("duration must be positive");
        }
        self.mode.delivery()?;
        Ok(())
    }

    /// Fails with `CapacityExceeded` when the requested event rate is above
    /// `utilization_cap * capacity`.
    pub fn check_capacity(&self, capacity_events_per_sec: f64) -> Result<(), BenchError> {
        let allowed = self.utilization_cap * capacity_events_per_sec;
        let required = self.events_per_sec();
        if required > allowed {
            return Err(BenchError::CapacityExceeded { required, allowed });
        }
        Ok(())
    }
}

/// `(T, S)` points of a sweep.
pub fn sweep_points(sweep: Sweep, paper_scale: bool) -> Vec<(u32, u32)> {
    match (sweep, paper_scale) {
        (Sweep::A, false) => [1, 5, 10, 25, 50].map(|t| (t, 2)).to_vec(),
        (Sweep::A, true) => [1, 10, 25, 50, 100, 200].map(|t| (t, 2)).to_vec(),
        (Sweep::B, false) => [1, 2, 4, 8, 16].map(|s| (10, s)).to_vec(),
        (Sweep::B, true) => [1, 2, 4, 8, 16, 32].map(|s| (10, s)).to_vec(),
        (Sweep::C, false) => grid(&[5, 10, 25], &[2, 4, 8]),
        (Sweep::C, true) => grid(&[10, 25, 50, 100], &[2, 4, 8, 16]),
        (Sweep::Custom, _) => Vec::new(),
    }
}

fn grid(ts: &[u32], ss: &[u32]) -> Vec<(u32, u32)> {
    ts.iter().flat_map(|&t| ss.iter().map(move |&s| (t, s))).collect()
}

/// One configuration per sweep point, other fields copied from `template`.
pub fn sweep_configs(sweep: Sweep, paper_scale: bool, template: &SweepConfig) -> Vec<SweepConfig> {
    sweep_points(sweep, paper_scale)
        .into_iter()
        .map(|(t, s)| SweepConfig {
            sweep,
            topics: t,
            subscribers_per_topic: s,
            ..template.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_sweeps() {
        assert_eq!(sweep_points(Sweep::A, false), vec![(1, 2), (5, 2), (10, 2), (25, 2), (50, 2)]);
        assert_eq!(sweep_points(Sweep::B, false).len(), 5);
        assert_eq!(sweep_points(Sweep::C, false).len(), 9);
        assert_eq!(sweep_points(Sweep::C, true).len(), 16);
        assert_eq!(sweep_points(Sweep::A, true).last(), Some(&(200, 2)));
        assert_eq!(sweep_points(Sweep::B, true).last(), Some(&(10, 32)));
    }

    #[test]
    fn publish_count_and_events() {
        let c = SweepConfig::new(Sweep::B, 10, 4);
        assert_eq!(c.publishes_per_topic(), 400);
        assert_eq!(c.events_per_sec(), 4000.0);
        assert_eq!(c.period(), Duration::from_millis(10));
    }

    #[test]
    fn capacity_cap() {
        let c = SweepConfig::new(Sweep::Custom, 10, 10);
        assert!(c.check_capacity(100_000.0).is_ok());
        assert!(matches!(
            c.check_capacity(10_000.0),
            Err(BenchError::CapacityExceeded { required, allowed }) if required == 10_000.0 && allowed == 6_000.0
        ));
    }

    #[test]
    fn validation() {
        let mut c = SweepConfig::new(Sweep::Custom, 1, 1);
        assert!(c.validate().is_ok());
        c.payload_bytes = 4;
        assert!(c.validate().is_err());
        let mut c = SweepConfig::new(Sweep::Custom, 1, 1);
        c.mode = Mode::Poll {
            interval: Duration::ZERO,
        };
        assert!(c.validate().is_err());
        let mut c = SweepConfig::new(Sweep::Custom, 0, 1);
        assert!(c.validate().is_err());
        c.topics = 1;
        c.utilization_cap = 1.5;
        assert!(c.validate().is_err());
    }
}
