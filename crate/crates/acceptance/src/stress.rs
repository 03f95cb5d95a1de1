//! Concurrent random workload on the poisoning in-process backend.
//!
//! Every endpoint runs on its own thread inside its own participant.
//! Subscribers hold, clone, read and drop handles at random; any endpoint
//! may crash, after which its thread starts a fresh participant and
//! re-registers. Every payload read through a live handle is checked for
//! poisoning and for content corruption.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use pubsub_core::arena::ArenaStats;
use pubsub_core::broker::BrokerConfig;
use pubsub_core::{ClientError, Domain, Durability, MessageHandle, Participant, Publisher, Qos, Subscriber};

const MAGIC: u32 = 0x5EED_F00D;
const PAYLOAD_LEN: usize = 24;
/// Handles a subscriber keeps before it starts dropping.
const HOLD_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy)]
pub struct StressConfig {
    pub topics: usize,
    pub max_endpoints_per_topic: usize,
    pub messages: u64,
    /// Crash probability per endpoint step, in parts per million.
    pub crash_ppm: u32,
    pub max_depth: u32,
    pub seed: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            topics: 10,
            max_endpoints_per_topic: 8,
            messages: 100_000,
            crash_ppm: 500,
            max_depth: 5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StressReport {
    pub published: u64,
    pub received: u64,
    pub payload_reads: u64,
    /// `PoisonedPayload` results from reads through live handles.
    pub poisoned_reads: u64,
    /// Reads that succeeded but returned bytes no publisher wrote.
    pub corrupt_reads: u64,
    pub crashes: u64,
    pub endpoints: usize,
    /// Sum over Transient Local publisher instances of
    /// `min(published, depth)`; Volatile publishers contribute nothing.
    pub expected_live_slots: usize,
    /// Arena statistics after every endpoint has released and departed.
    pub quiescent: ArenaStats,
    pub elapsed: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum StressError {
    #[error("endpoint operation failed: {0}")]
    Client(#[from] ClientError),
    #[error("actor thread panicked")]
    Panic,
}

fn encode(pid: u32, seq: u64) -> [u8; PAYLOAD_LEN] {
    let mut b = [0u8; PAYLOAD_LEN];
    b[..4].copy_from_slice(&MAGIC.to_le_bytes());
    b[4..8].copy_from_slice(&pid.to_le_bytes());
    b[8..16].copy_from_slice(&seq.to_le_bytes());
    b[16..24].copy_from_slice(&(seq ^ u64::from(pid).rotate_left(32) ^ 0xA5A5_A5A5_A5A5_A5A5).to_le_bytes());
    b
}

fn well_formed(b: &[u8]) -> bool {
    if b.len() != PAYLOAD_LEN {
        return false;
    }
    let word = |r: std::ops::Range<usize>| u64::from_le_bytes(b[r].try_into().expect("8 bytes"));
    let pid = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
    u32::from_le_bytes(b[..4].try_into().expect("4 bytes")) == MAGIC
        && word(16..24) == word(8..16) ^ u64::from(pid).rotate_left(32) ^ 0xA5A5_A5A5_A5A5_A5A5
}

#[derive(Debug, Default)]
struct Tallies {
    received: AtomicU64,
    reads: AtomicU64,
    poisoned: AtomicU64,
    corrupt: AtomicU64,
    crashes: AtomicU64,
}

impl Tallies {
    fn read(&self, h: &MessageHandle) {
        self.reads.fetch_add(1, Ordering::Relaxed);
        match h.payload() {
            Ok(view) => {
                if !well_formed(&view) {
                    self.corrupt.fetch_add(1, Ordering::Relaxed);
                }
            }
            Err(e) if e.is_poisoned() => {
                self.poisoned.fetch_add(1, Ordering::Relaxed);
            }
            Err(_) => {
                self.corrupt.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TopicPlan {
    durability: Durability,
    publishers: usize,
    subscribers: usize,
}

fn qos(durability: Durability, depth: u32) -> Qos {
    match durability {
        Durability::TransientLocal => Qos::transient_local(depth),
        Durability::Volatile => Qos::volatile(depth),
    }
}

/// One publisher instance: what it published and how much of it the
/// broker must retain once everyone has left.
struct Instance {
    qos: Qos,
    published: u64,
}

struct PublisherEnd {
    participant: Participant,
    publisher: Publisher,
    instances: Vec<Instance>,
}

struct SubscriberEnd {
    participant: Participant,
    subscriber: Subscriber,
    held: Vec<MessageHandle>,
}

struct Shared {
    domain: Arc<Domain>,
    tallies: Tallies,
    budget: AtomicU64,
    stop: AtomicBool,
    crash_ppm: u32,
}

impl Shared {
    fn crash_roll(&self, rng: &mut StdRng) -> bool {
        rng.gen_range(0..1_000_000) < self.crash_ppm
    }
}

fn publisher_actor(shared: &Shared, topic: &str, qos: Qos, seed: u64) -> Result<PublisherEnd, StressError> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut participant = shared.domain.spawn();
    let mut publisher = participant.create_publisher(topic, qos)?;
    let mut instances = vec![Instance { qos, published: 0 }];
    let mut seq = 0u64;
    while shared.budget.fetch_update(Ordering::AcqRel, Ordering::Acquire, |b| b.checked_sub(1)).is_ok() {
        if shared.crash_roll(&mut rng) {
            participant.crash();
            shared.tallies.crashes.fetch_add(1, Ordering::Relaxed);
            participant = shared.domain.spawn();
            publisher = participant.create_publisher(topic, qos)?;
            instances.push(Instance { qos, published: 0 });
        }
        seq += 1;
        publisher.loan_with(&encode(participant.pid().0, seq))?.publish().map_err(ClientError::from)?;
        instances.last_mut().expect("current instance").published += 1;
        if rng.gen_ratio(1, 8) {
            std::thread::yield_now();
        }
    }
    Ok(PublisherEnd {
        participant,
        publisher,
        instances,
    })
}

fn subscriber_actor(shared: &Shared, topic: &str, qos: Qos, seed: u64) -> Result<SubscriberEnd, StressError> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut participant = shared.domain.spawn();
    let mut subscriber = participant.create_subscriber(topic, qos)?;
    let mut held: Vec<MessageHandle> = Vec::new();
    let t = &shared.tallies;
    while !shared.stop.load(Ordering::Acquire) {
        if shared.crash_roll(&mut rng) {
            participant.crash_discarding(std::mem::take(&mut held));
            t.crashes.fetch_add(1, Ordering::Relaxed);
            participant = shared.domain.spawn();
            subscriber = participant.create_subscriber(topic, qos)?;
        }
        let got = subscriber.receive()?;
        if got.is_empty() {
            std::thread::yield_now();
        }
        t.received.fetch_add(got.len() as u64, Ordering::Relaxed);
        for h in got {
            t.read(&h);
            held.push(h);
        }
        if !held.is_empty() {
            match rng.gen_range(0..4) {
                0 => {
                    let i = rng.gen_range(0..held.len());
                    let c = held[i].try_clone().map_err(ClientError::from)?;
                    held.push(c);
                }
                1 => {
                    let i = rng.gen_range(0..held.len());
                    t.read(&held[i]);
                }
                _ => {}
            }
        }
        while held.len() > HOLD_LIMIT || (!held.is_empty() && rng.gen_ratio(1, 3)) {
            let i = rng.gen_range(0..held.len());
            t.read(&held[i]);
            held.swap_remove(i);
        }
    }
    Ok(SubscriberEnd {
        participant,
        subscriber,
        held,
    })
}

/// Runs the workload, then releases every handle and unregisters every
/// endpoint before reading the arena statistics.
pub fn run_stress(cfg: StressConfig) -> Result<StressReport, StressError> {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let shared = Shared {
        domain: Domain::with_arena_capacity(BrokerConfig::default(), 256 * 1024),
        tallies: Tallies::default(),
        budget: AtomicU64::new(cfg.messages),
        stop: AtomicBool::new(false),
        crash_ppm: cfg.crash_ppm,
    };
    let plans: Vec<TopicPlan> = (0..cfg.topics)
        .map(|_| {
            let durability = if rng.gen_bool(0.5) {
                Durability::TransientLocal
            } else {
                Durability::Volatile
            };
            let publishers = rng.gen_range(1..=2.min(cfg.max_endpoints_per_topic - 1));
            let subscribers = rng.gen_range(1..=cfg.max_endpoints_per_topic - publishers);
            TopicPlan {
                durability,
                publishers,
                subscribers,
            }
        })
        .collect();
    let mut roles = Vec::new();
    for (t, plan) in plans.iter().enumerate() {
        for _ in 0..plan.publishers {
            roles.push((t, true, qos(plan.durability, rng.gen_range(1..=cfg.max_depth)), rng.gen()));
        }
        for _ in 0..plan.subscribers {
            roles.push((t, false, qos(plan.durability, rng.gen_range(1..=cfg.max_depth)), rng.gen()));
        }
    }

    let (publishers, subscribers) = std::thread::scope(|scope| -> Result<_, StressError> {
        let shared = &shared;
        let mut pub_joins = Vec::new();
        let mut sub_joins = Vec::new();
        for &(t, is_pub, qos, seed) in &roles {
            let topic = format!("stress/{t}");
            if is_pub {
                pub_joins.push(scope.spawn(move || publisher_actor(shared, &topic, qos, seed)));
            } else {
                sub_joins.push(scope.spawn(move || subscriber_actor(shared, &topic, qos, seed)));
            }
        }
        let publishers: Vec<_> = pub_joins.into_iter().map(|j| j.join().map_err(|_| StressError::Panic)).collect();
        shared.stop.store(true, Ordering::Release);
        let subscribers: Vec<_> = sub_joins.into_iter().map(|j| j.join().map_err(|_| StressError::Panic)).collect();
        let publishers = publishers.into_iter().map(|r| r?).collect::<Result<Vec<_>, _>>()?;
        let subscribers = subscribers.into_iter().map(|r| r?).collect::<Result<Vec<_>, _>>()?;
        Ok((publishers, subscribers))
    })?;

    let t = &shared.tallies;
    let mut report = StressReport {
        endpoints: roles.len(),
        ..StressReport::default()
    };
    for p in &publishers {
        for i in &p.instances {
            report.published += i.published;
            if i.qos.durability == Durability::TransientLocal {
                report.expected_live_slots += i.published.min(i.qos.depth as u64) as usize;
            }
        }
    }
    let mut participants = Vec::new();
    let mut endpoints_left = Vec::new();
    for mut s in subscribers {
        for h in &s.held {
            t.read(h);
        }
        s.held.clear();
        participants.push(s.participant);
        endpoints_left.push(s.subscriber);
    }
    drop(endpoints_left);
    for p in publishers {
        drop(p.publisher);
        participants.push(p.participant);
    }
    report.quiescent = shared.domain.arena_stats();
    drop(participants);

    report.received = t.received.load(Ordering::Relaxed);
    report.payload_reads = t.reads.load(Ordering::Relaxed);
    report.poisoned_reads = t.poisoned.load(Ordering::Relaxed);
    report.corrupt_reads = t.corrupt.load(Ordering::Relaxed);
    report.crashes = t.crashes.load(Ordering::Relaxed);
    report.elapsed = started.elapsed();
    Ok(report)
}
