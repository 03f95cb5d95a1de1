//! Running one configuration and the per-endpoint actor loops shared by both
//! backends.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Barrier;
use std::time::Duration;

use pubsub_core::broker::{BrokerConfig, UpdateCounters};
use pubsub_core::clock::monotonic_ns;
use pubsub_core::notify::{DeliveryMode, NotifyError, PollTicker};
use pubsub_core::types::Qos;
use pubsub_core::{Domain, Publisher, Subscriber};
use serde::{Deserialize, Serialize};

use crate::config::{Backend, SweepConfig};
use crate::sample::{ActorSamples, Coords, LatencySample, Metric};
use crate::BenchError;

/// Extra time subscribers keep draining after the last scheduled publish.
pub const DRAIN_GRACE: Duration = Duration::from_secs(2);
/// Byte offset of the "inside the measurement window" flag in a payload.
const MEASURED_FLAG: usize = 8;

/// Timing shared by every actor of one iteration, in monotonic nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub start_ns: u64,
    pub measure_from_ns: u64,
    pub period_ns: u64,
    pub count: u64,
    pub payload_bytes: usize,
}

impl Schedule {
    pub fn new(cfg: &SweepConfig, start_ns: u64) -> Self {
        Self {
            start_ns,
            measure_from_ns: start_ns + cfg.warmup.as_nanos() as u64,
            period_ns: cfg.period().as_nanos() as u64,
            count: cfg.publishes_per_topic(),
            payload_bytes: cfg.payload_bytes,
        }
    }

    pub fn deadline_ns(&self) -> u64 {
        self.start_ns + self.count * self.period_ns + DRAIN_GRACE.as_nanos() as u64
    }
}

/// What one actor reports back to the coordinator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorReport {
    pub samples: ActorSamples,
    pub published: u64,
    /// Publishes whose payload carries the measurement flag.
    pub measured_publishes: u64,
    /// Subscriber count summed over publish receipts.
    pub notified: u64,
    pub received: u64,
    /// Entry ids skipped or never received before the deadline.
    pub lost: u64,
    pub duplicates: u64,
}

/// Drops this thread's timer slack to 1 ns so publishes happen at their
/// scheduled instants instead of being merged with other threads' timer
/// expiries (which would line them up with polling ticks). Subscribers keep
/// the host's default slack.
pub fn tighten_timer_slack() {
    // SAFETY: PR_SET_TIMERSLACK takes one integer argument and only affects
    // the calling thread.
    let rc = unsafe { libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong, 0, 0, 0) };
    if rc != 0 {
        log::debug!("PR_SET_TIMERSLACK failed: {}", std::io::Error::last_os_error());
    }
}

fn sleep_until(target_ns: u64) {
    loop {
        let now = monotonic_ns();
        if now >= target_ns {
            return;
        }
        std::thread::sleep(Duration::from_nanos(target_ns - now));
    }
}

/// Publishes `schedule.count` messages at the scheduled instants.
pub fn publish_loop(publisher: &Publisher, schedule: &Schedule) -> Result<ActorReport, BenchError> {
    let fail = |e: &dyn std::fmt::Display| BenchError::RunFailure(format!("publisher {}: {e}", publisher.topic()));
    tighten_timer_slack();
    let mut report = ActorReport::default();
    for k in 0..schedule.count {
        sleep_until(schedule.start_ns + k * schedule.period_ns);
        let t0 = monotonic_ns();
        let measured = t0 >= schedule.measure_from_ns;
        let mut handle = publisher.loan(schedule.payload_bytes as u64).map_err(|e| fail(&e))?;
        let t_publish = monotonic_ns();
        {
            let mut payload = handle.payload_mut().map_err(|e| fail(&e))?;
            payload[..8].copy_from_slice(&t_publish.to_le_bytes());
            if schedule.payload_bytes > MEASURED_FLAG {
                payload[MEASURED_FLAG] = measured as u8;
            }
        }
        let receipt = handle.publish().map_err(|e| fail(&e))?;
        let t1 = monotonic_ns();
        if measured {
            report.samples.push(Metric::Publish, t0, t1);
            report.measured_publishes += 1;
        }
        report.published += 1;
        report.notified += receipt.notified_subscriber_count as u64;
    }
    Ok(report)
}

/// Receives until every scheduled entry arrived or the deadline passed,
/// waiting on the wakeup queue (event mode) or a fixed tick (poll mode).
pub fn subscribe_loop(
    subscriber: &Subscriber,
    schedule: &Schedule,
    mode: DeliveryMode,
) -> Result<ActorReport, BenchError> {
    let fail = |e: &dyn std::fmt::Display| BenchError::RunFailure(format!("subscriber {}: {e}", subscriber.id()));
    let mut report = ActorReport::default();
    let first = subscriber.initial_watermark().0 + 1;
    let last = first + schedule.count - 1;
    let mut next = first;
    let deadline = schedule.deadline_ns();
    let mut ticker = match mode {
        DeliveryMode::Polling { interval } => Some(PollTicker::new(interval).map_err(|e| fail(&e))?),
        DeliveryMode::EventDriven => None,
    };
    while next <= last {
        let now = monotonic_ns();
        if now >= deadline {
            break;
        }
        match ticker.as_mut() {
            Some(t) => t.wait_tick(),
            None => {
                let left = Duration::from_nanos(deadline - now).min(Duration::from_millis(50));
                match subscriber.wait(left) {
                    Ok(()) | Err(NotifyError::Timeout) => {}
                    Err(e) => return Err(fail(&e)),
                }
            }
        }
        let t0 = monotonic_ns();
        let handles = subscriber.receive().map_err(|e| fail(&e))?;
        let t1 = monotonic_ns();
        if handles.is_empty() {
            continue;
        }
        if t0 >= schedule.measure_from_ns {
            report.samples.push(Metric::Receive, t0, t1);
        }
        for h in handles {
            let t_receive = monotonic_ns();
            let payload = h.payload().map_err(|e| fail(&e))?;
            let t_publish = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes"));
            let measured = payload.get(MEASURED_FLAG).copied().unwrap_or(1) != 0;
            drop(payload);
            if measured {
                report.samples.push(Metric::E2e, t_publish, t_receive);
            }
            let id = h.entry_id().expect("received handles carry an entry id").0;
            report.received += 1;
            if id < next {
                report.duplicates += 1;
            } else {
                report.lost += id - next;
                next = id + 1;
            }
        }
    }
    report.lost += (last + 1).saturating_sub(next);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: SweepConfig,
    pub samples: Vec<LatencySample>,
    pub publishes: u64,
    pub measured_publishes: u64,
    /// Wakeups handed to live subscriber queues.
    pub notify_calls: u64,
    /// Broker instrumentation summed over iterations.
    pub counters: UpdateCounters,
    pub lost_entries: u64,
    pub duplicate_entries: u64,
}

impl RunResult {
    pub fn values(&self, metric: Metric) -> Vec<f64> {
        self.samples
            .iter()
            .filter(|s| s.metric == metric)
            .map(LatencySample::value_us)
            .collect()
    }

    pub fn count(&self, metric: Metric) -> usize {
        self.samples.iter().filter(|s| s.metric == metric).count()
    }

    /// Entries lost, duplicated, or measured publishes without exactly one
    /// E2E sample per subscriber.
    pub fn conserved(&self) -> bool {
        self.lost_entries == 0
            && self.duplicate_entries == 0
            && self.count(Metric::E2e) as u64 == self.measured_publishes * self.config.subscribers_per_topic as u64
    }

    fn absorb(&mut self, it: IterationOutcome) {
        self.samples.extend(it.samples);
        self.publishes += it.publishes;
        self.measured_publishes += it.measured_publishes;
        self.notify_calls += it.notify_calls;
        let c = &mut self.counters;
        c.publish_ops += it.counters.publish_ops;
        c.receive_bit_sets += it.counters.receive_bit_sets;
        c.release_bit_clears += it.counters.release_bit_clears;
        c.membership_ops += it.counters.membership_ops;
        self.lost_entries += it.lost;
        self.duplicate_entries += it.duplicates;
    }
}

#[derive(Debug, Default)]
pub(crate) struct IterationOutcome {
    pub samples: Vec<LatencySample>,
    pub publishes: u64,
    pub measured_publishes: u64,
    pub notify_calls: u64,
    pub counters: UpdateCounters,
    pub lost: u64,
    pub duplicates: u64,
}

impl IterationOutcome {
    pub(crate) fn add_actor(&mut self, report: &ActorReport, coords: Coords) {
        self.samples.extend(report.samples.attach(coords));
        self.publishes += report.published;
        self.measured_publishes += report.measured_publishes;
        self.lost += report.lost;
        self.duplicates += report.duplicates;
    }
}

/// Coordinates of the process running endpoint `index`: publishers are
/// `0..T`, subscriber `s` of topic `t` is `T + t * S + s`.
pub fn coords(cfg: &SweepConfig, iteration: u32, process: u32) -> Coords {
    Coords {
        topics: cfg.topics,
        subscribers: cfg.subscribers_per_topic,
        rate_hz: cfg.rate_hz,
        iteration,
        process,
    }
}

pub fn topic_name(t: u32) -> String {
    format!("bench/topic{t}")
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Executable started for each shared-memory actor; defaults to the
    /// current executable, which must accept the `actor` subcommand.
    pub actor_exe: Option<PathBuf>,
}

/// Runs every iteration of `cfg` after checking it against the measured
/// host capacity (events per second).
pub fn run_config(cfg: &SweepConfig, capacity: f64) -> Result<RunResult, BenchError> {
    run_config_with(cfg, capacity, &RunOptions::default())
}

pub fn run_config_with(cfg: &SweepConfig, capacity: f64, options: &RunOptions) -> Result<RunResult, BenchError> {
    cfg.validate()?;
    cfg.check_capacity(capacity)?;
    let mut result = RunResult {
        config: cfg.clone(),
        samples: Vec::new(),
        publishes: 0,
        measured_publishes: 0,
        notify_calls: 0,
        counters: UpdateCounters::default(),
        lost_entries: 0,
        duplicate_entries: 0,
    };
    for iteration in 0..cfg.iterations {
        let outcome = match cfg.backend {
            Backend::InProc => run_inproc(cfg, iteration)?,
            Backend::Shm => crate::shm::run_iteration(cfg, iteration, options)?,
        };
        result.absorb(outcome);
    }
    Ok(result)
}

/// Arena bytes per publisher: the retained window plus slack for entries in
/// flight.
pub(crate) fn publisher_arena_bytes(cfg: &SweepConfig) -> u64 {
    let slot = (cfg.payload_bytes as u64).next_multiple_of(64) + 64;
    (slot * (cfg.depth as u64 * 2 + 64)).max(64 * 1024)
}

fn run_inproc(cfg: &SweepConfig, iteration: u32) -> Result<IterationOutcome, BenchError> {
    let mode = cfg.mode.delivery()?;
    let domain = Domain::with_arena_capacity(BrokerConfig::default(), publisher_arena_bytes(cfg));
    let qos = Qos::volatile(cfg.depth);
    let spawn_err = |e: &dyn std::fmt::Display| BenchError::SpawnFailure(e.to_string());

    let mut subscribers = Vec::new();
    for t in 0..cfg.topics {
        for s in 0..cfg.subscribers_per_topic {
            let participant = domain.spawn();
            let sub = participant.create_subscriber(&topic_name(t), qos).map_err(|e| spawn_err(&e))?;
            subscribers.push((cfg.topics + t * cfg.subscribers_per_topic + s, participant, sub));
        }
    }
    let mut publishers = Vec::new();
    for t in 0..cfg.topics {
        let participant = domain.spawn();
        let publisher = participant.create_publisher(&topic_name(t), qos).map_err(|e| spawn_err(&e))?;
        publishers.push((t, participant, publisher));
    }

    let start = AtomicU64::new(0);
    let barrier = Barrier::new(publishers.len() + subscribers.len() + 1);
    let mut outcome = IterationOutcome::default();
    let reports = std::thread::scope(|scope| -> Result<Vec<(u32, ActorReport)>, BenchError> {
        let mut joins = Vec::new();
        for (process, _, sub) in &subscribers {
            let (start, barrier) = (&start, &barrier);
            let join = std::thread::Builder::new()
                .name(format!("sub-{process}"))
                .spawn_scoped(scope, move || {
                    barrier.wait();
                    let schedule = Schedule::new(cfg, start.load(Ordering::Acquire));
                    subscribe_loop(sub, &schedule, mode)
                })
                .map_err(|e| spawn_err(&e))?;
            joins.push((*process, join));
        }
        for (process, _, publisher) in &publishers {
            let (start, barrier) = (&start, &barrier);
            let join = std::thread::Builder::new()
                .name(format!("pub-{process}"))
                .spawn_scoped(scope, move || {
                    barrier.wait();
                    let schedule = Schedule::new(cfg, start.load(Ordering::Acquire));
                    publish_loop(publisher, &schedule)
                })
                .map_err(|e| spawn_err(&e))?;
            joins.push((*process, join));
        }
        start.store(monotonic_ns() + 2_000_000, Ordering::Release);
        barrier.wait();
        joins
            .into_iter()
            .map(|(process, j)| {
                let report = j
                    .join()
                    .map_err(|_| BenchError::RunFailure(format!("actor {process} panicked")))??;
                Ok((process, report))
            })
            .collect()
    })?;
    for (process, report) in &reports {
        outcome.add_actor(report, coords(cfg, iteration, *process));
    }
    outcome.notify_calls = domain.notify_stats().notified();
    drop(subscribers);
    drop(publishers);
    outcome.counters = domain.broker().counters();
    Ok(outcome)
}
