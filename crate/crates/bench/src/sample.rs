use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Publish,
    Receive,
    E2e,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Publish, Metric::Receive, Metric::E2e];

    pub fn label(&self) -> &'static str {
        match self {
            Metric::Publish => "publish",
            Metric::Receive => "receive",
            Metric::E2e => "e2e",
        }
    }

    pub fn from_label(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.label() == s)
    }
}

/// Position of a sample in the sweep: topic count, fan-out, rate, iteration
/// and the emitting process (publishers first, then subscribers).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coords {
    pub topics: u32,
    pub subscribers: u32,
    pub rate_hz: f64,
    pub iteration: u32,
    pub process: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub metric: Metric,
    /// Start of the measured interval, monotonic nanoseconds.
    pub t_start: u64,
    /// End of the measured interval, monotonic nanoseconds.
    pub t_end: u64,
    pub coords: Coords,
}

impl LatencySample {
    pub fn value_us(&self) -> f64 {
        self.t_end.saturating_sub(self.t_start) as f64 / 1_000.0
    }
}

/// Samples of one actor, before coordinates are attached.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorSamples {
    pub spans: Vec<(Metric, u64, u64)>,
}

impl ActorSamples {
    pub fn push(&mut self, metric: Metric, t_start: u64, t_end: u64) {
        self.spans.push((metric, t_start, t_end));
    }

    pub fn attach(&self, coords: Coords) -> impl Iterator<Item = LatencySample> + '_ {
        self.spans.iter().map(move |&(metric, t_start, t_end)| LatencySample {
            metric,
            t_start,
            t_end,
            coords,
        })
    }
}
