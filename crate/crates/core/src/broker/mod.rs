//! Single-writer metadata broker.
//!
//! The broker owns the data plane (entry records and their subscriber
//! bitmaps) and the control plane (endpoint tables, watermarks) of every
//! topic. All metadata mutations go through it.
//!
//! Locking follows a strict two-level hierarchy, always global before topic:
//!
//! | operation         | global | topic |
//! |-------------------|--------|-------|
//! | publish           | READ   | WRITE |
//! | receive           | READ   | READ  |
//! | release           | READ   | READ  |
//! | membership / exit | WRITE  | -     |
//!
//! Receive and release only touch per-entry atomic bits and the caller's own
//! watermark, so they run under the topic read lock. Membership changes hold
//! the global write lock and reach topic state through `&mut`, which excludes
//! every other operation without taking the topic lock at all.

mod bitmap;

pub use bitmap::AtomicBitmap;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use thiserror::Error;

use crate::arena::ArenaRef;
use crate::types::{Durability, EntryId, Pid, PublisherId, Qos, SubscriberId};

pub const DEFAULT_BITMAP_WIDTH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("topic {topic:?} has no free endpoint ids (width {width})")]
    IdSpaceExhausted { topic: String, width: usize },
    #[error("unknown endpoint on topic {0:?}")]
    UnknownEndpoint(String),
    #[error("topic {0:?} no longer exists")]
    TopicGone(String),
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("entry {entry} not present on topic {topic:?}")]
    UnknownEntry { topic: String, entry: EntryId },
    #[error("{subscriber} holds no reference to entry {entry}")]
    BitNotSet { subscriber: SubscriberId, entry: EntryId },
    #[error("topic name must be nonempty and at most 255 bytes")]
    InvalidTopicName,
    #[error("QoS depth must be at least 1")]
    InvalidQos,
    #[error("broker transport failure: {0}")]
    Transport(String),
    #[error("broker rejected request: {0}")]
    Remote(String),
}

/// Called inside the receive critical section (test instrumentation).
pub type ReceiveProbe = Arc<dyn Fn(&str, SubscriberId) + Send + Sync>;

#[derive(Clone)]
pub struct BrokerConfig {
    /// Bitmap width; bounds the number of subscriber (and publisher) ids a
    /// topic can ever hand out.
    pub max_subscribers_per_topic: usize,
    /// Record the lock modes taken by every operation.
    pub record_lock_modes: bool,
    pub receive_probe: Option<ReceiveProbe>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            max_subscribers_per_topic: DEFAULT_BITMAP_WIDTH,
            record_lock_modes: false,
            receive_probe: None,
        }
    }
}

impl std::fmt::Debug for BrokerConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BrokerConfig")
            .field("max_subscribers_per_topic", &self.max_subscribers_per_topic)
            .field("record_lock_modes", &self.record_lock_modes)
            .field("receive_probe", &self.receive_probe.is_some())
            .finish()
    }
}

/// Global-update instrumentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UpdateCounters {
    pub publish_ops: u64,
    pub receive_bit_sets: u64,
    pub release_bit_clears: u64,
    pub membership_ops: u64,
}

impl UpdateCounters {
    /// Updates to per-message global state (membership excluded).
    pub fn message_updates(&self) -> u64 {
        self.publish_ops + self.receive_bit_sets + self.release_bit_clears
    }

    fn add(&mut self, o: &UpdateCounters) {
        self.publish_ops += o.publish_ops;
        self.receive_bit_sets += o.receive_bit_sets;
        self.release_bit_clears += o.release_bit_clears;
        self.membership_ops += o.membership_ops;
    }
}

#[derive(Debug, Default)]
struct TopicCounters {
    publish_ops: AtomicU64,
    receive_bit_sets: AtomicU64,
    release_bit_clears: AtomicU64,
    membership_ops: AtomicU64,
}

impl TopicCounters {
    fn load(&self) -> UpdateCounters {
        UpdateCounters {
            publish_ops: self.publish_ops.load(Ordering::Relaxed),
            receive_bit_sets: self.receive_bit_sets.load(Ordering::Relaxed),
            release_bit_clears: self.release_bit_clears.load(Ordering::Relaxed),
            membership_ops: self.membership_ops.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpClass {
    Publish,
    Receive,
    Release,
    Membership,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LockMode {
    Read,
    Write,
}

/// Lock modes held by one operation; `topic` is `None` when the per-topic
/// lock was not taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LockAcquisition {
    pub op: OpClass,
    pub global: LockMode,
    pub topic: Option<LockMode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishOutcome {
    pub entry_id: EntryId,
    pub subscribers: Vec<SubscriberId>,
    pub evicted: Vec<ArenaRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriberRegistration {
    pub id: SubscriberId,
    pub initial_watermark: EntryId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub entry_id: EntryId,
    pub payload: ArenaRef,
}

#[derive(Debug)]
struct EntryRecord {
    payload: ArenaRef,
    publisher: PublisherId,
    bitmap: AtomicBitmap,
}

#[derive(Debug, Clone, Copy)]
struct PublisherRecord {
    pid: Pid,
    qos: Qos,
}

#[derive(Debug)]
struct SubscriberRecord {
    pid: Pid,
    qos: Qos,
    watermark: AtomicU64,
}

#[derive(Debug, Default)]
struct TopicState {
    entries: BTreeMap<EntryId, EntryRecord>,
    publishers: BTreeMap<PublisherId, PublisherRecord>,
    /// Publishers that left or crashed while entries of theirs remained.
    departed: BTreeMap<PublisherId, PublisherRecord>,
    subscribers: BTreeMap<SubscriberId, SubscriberRecord>,
    /// Entry ids per publisher (live or departed), ascending.
    owned: BTreeMap<PublisherId, BTreeSet<EntryId>>,
    next_entry_id: u64,
    next_publisher_id: u32,
    next_subscriber_id: u32,
}

impl TopicState {
    fn new() -> Self {
        Self {
            next_entry_id: 1,
            ..Self::default()
        }
    }

    fn latest_entry_id(&self) -> EntryId {
        EntryId(self.next_entry_id - 1)
    }

    fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.publishers.is_empty() && self.subscribers.is_empty()
    }

    /// Depth governing eviction of `publisher`'s entries. Departed Volatile
    /// publishers retain nothing.
    fn retention_depth(&self, publisher: PublisherId) -> u64 {
        if let Some(p) = self.publishers.get(&publisher) {
            return p.qos.depth as u64;
        }
        match self.departed.get(&publisher) {
            Some(p) if p.qos.durability == Durability::TransientLocal => p.qos.depth as u64,
            _ => 0,
        }
    }

    /// Evicts `publisher`'s entries whose bitmap is zero and that have at
    /// least `depth` newer entries from the same publisher.
    fn sweep_publisher(&mut self, publisher: PublisherId, evicted: &mut Vec<ArenaRef>) {
        let depth = self.retention_depth(publisher);
        let Some(ids) = self.owned.get_mut(&publisher) else {
            return;
        };
        let n = ids.len() as u64;
        let mut doomed = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let newer = n - 1 - i as u64;
            if newer < depth {
                break;
            }
            if self.entries[id].bitmap.is_zero() {
                doomed.push(*id);
            }
        }
        for id in doomed {
            ids.remove(&id);
            let entry = self.entries.remove(&id).expect("owned entry present");
            evicted.push(entry.payload);
        }
        if ids.is_empty() && !self.publishers.contains_key(&publisher) {
            self.owned.remove(&publisher);
            self.departed.remove(&publisher);
        }
    }

    fn sweep_all(&mut self, evicted: &mut Vec<ArenaRef>) {
        let publishers: Vec<_> = self.owned.keys().copied().collect();
        for p in publishers {
            self.sweep_publisher(p, evicted);
        }
    }

    fn remove_subscriber(&mut self, id: SubscriberId) -> Option<SubscriberRecord> {
        let rec = self.subscribers.remove(&id)?;
        for entry in self.entries.values() {
            entry.bitmap.test_and_clear(id.0 as usize);
        }
        Some(rec)
    }

    fn remove_publisher(&mut self, id: PublisherId) -> Option<PublisherRecord> {
        let rec = self.publishers.remove(&id)?;
        if self.owned.contains_key(&id) {
            self.departed.insert(id, rec);
        }
        Some(rec)
    }

    /// Initial watermark for a new subscriber.
    ///
    /// Transient Local joiners start so that their first receive returns the
    /// newest `min(subscriber depth, retained)` entries, where the retained
    /// set is the newest `depth` entries of every Transient Local publisher
    /// (live or departed). Volatile joiners only see future entries.
    fn initial_watermark(&self, qos: Qos) -> EntryId {
        let latest = self.latest_entry_id();
        if qos.durability == Durability::Volatile {
            return latest;
        }
        let mut retained: Vec<EntryId> = Vec::new();
        for (publisher, ids) in &self.owned {
            let rec = self.publishers.get(publisher).or_else(|| self.departed.get(publisher));
            let Some(rec) = rec.filter(|r| r.qos.durability == Durability::TransientLocal) else {
                continue;
            };
            retained.extend(ids.iter().rev().take(rec.qos.depth as usize));
        }
        retained.sort_unstable();
        let k = retained.len().min(qos.depth as usize);
        if k == 0 {
            latest
        } else {
            EntryId(retained[retained.len() - k].0 - 1)
        }
    }
}

struct Topic {
    state: RwLock<TopicState>,
    counters: TopicCounters,
}

#[derive(Default)]
struct Registry {
    topics: HashMap<String, Box<Topic>>,
    /// Counters of topics that have been removed.
    retired_totals: UpdateCounters,
}

/// Thread-safe metadata broker.
pub struct Broker {
    config: BrokerConfig,
    registry: RwLock<Registry>,
    /// Odd while a membership change is in progress.
    membership_gen: AtomicU64,
    lock_log: Mutex<BTreeMap<LockAcquisition, u64>>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new(BrokerConfig::default())
    }
}

struct MembershipGuard<'a> {
    registry: RwLockWriteGuard<'a, Registry>,
    gen: &'a AtomicU64,
}

impl Drop for MembershipGuard<'_> {
    fn drop(&mut self) {
        self.gen.fetch_add(1, Ordering::Release);
    }
}

fn validate_topic(topic: &str) -> Result<(), BrokerError> {
    if topic.is_empty() || topic.len() > 255 {
        return Err(BrokerError::InvalidTopicName);
    }
    Ok(())
}

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        assert!(config.max_subscribers_per_topic >= 1, "bitmap width must be positive");
        Self {
            config,
            registry: RwLock::new(Registry::default()),
            membership_gen: AtomicU64::new(0),
            lock_log: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    fn width(&self) -> usize {
        self.config.max_subscribers_per_topic
    }

    fn record(&self, op: OpClass, global: LockMode, topic: Option<LockMode>) {
        if self.config.record_lock_modes {
            *self.lock_log.lock().entry(LockAcquisition { op, global, topic }).or_default() += 1;
        }
    }

    fn data_path(&self) -> RwLockReadGuard<'_, Registry> {
        let guard = self.registry.read();
        debug_assert_eq!(
            self.membership_gen.load(Ordering::Acquire) % 2,
            0,
            "data-path operation observed a half-applied membership change"
        );
        guard
    }

    fn membership(&self) -> MembershipGuard<'_> {
        let registry = self.registry.write();
        self.membership_gen.fetch_add(1, Ordering::Acquire);
        self.record(OpClass::Membership, LockMode::Write, None);
        MembershipGuard {
            registry,
            gen: &self.membership_gen,
        }
    }

    /// Lock acquisitions recorded so far (empty unless enabled in config).
    pub fn lock_acquisitions(&self) -> BTreeMap<LockAcquisition, u64> {
        self.lock_log.lock().clone()
    }

    pub fn register_publisher(&self, topic: &str, qos: Qos, pid: Pid) -> Result<PublisherId, BrokerError> {
        validate_topic(topic)?;
        if !qos.is_valid() {
            return Err(BrokerError::InvalidQos);
        }
        let width = self.width();
        let mut m = self.membership();
        let t = m.registry.topics.entry(topic.to_owned()).or_insert_with(|| {
            Box::new(Topic {
                state: RwLock::new(TopicState::new()),
                counters: TopicCounters::default(),
            })
        });
        let st = t.state.get_mut();
        if st.next_publisher_id as usize >= width {
            return Err(BrokerError::IdSpaceExhausted {
                topic: topic.to_owned(),
                width,
            });
        }
        let id = PublisherId(st.next_publisher_id);
        st.next_publisher_id += 1;
        st.publishers.insert(id, PublisherRecord { pid, qos });
        t.counters.membership_ops.fetch_add(1, Ordering::Relaxed);
        Ok(id)
    }

    pub fn register_subscriber(
        &self,
        topic: &str,
        qos: Qos,
        pid: Pid,
    ) -> Result<SubscriberRegistration, BrokerError> {
        validate_topic(topic)?;
        if !qos.is_valid() {
            return Err(BrokerError::InvalidQos);
        }
        let width = self.width();
        let mut m = self.membership();
        let t = m.registry.topics.entry(topic.to_owned()).or_insert_with(|| {
            Box::new(Topic {
                state: RwLock::new(TopicState::new()),
                counters: TopicCounters::default(),
            })
        });
        let st = t.state.get_mut();
        if st.next_subscriber_id as usize >= width {
            return Err(BrokerError::IdSpaceExhausted {
                topic: topic.to_owned(),
                width,
            });
        }
        let id = SubscriberId(st.next_subscriber_id);
        st.next_subscriber_id += 1;
        let initial_watermark = st.initial_watermark(qos);
        st.subscribers.insert(
            id,
            SubscriberRecord {
                pid,
                qos,
                watermark: AtomicU64::new(initial_watermark.0),
            },
        );
        t.counters.membership_ops.fetch_add(1, Ordering::Relaxed);
        Ok(SubscriberRegistration { id, initial_watermark })
    }

    /// Removes an empty topic, folding its counters into the totals.
    fn drop_if_empty(registry: &mut Registry, topic: &str) {
        let empty = registry
            .topics
            .get_mut(topic)
            .is_some_and(|t| t.state.get_mut().is_empty());
        if empty {
            let t = registry.topics.remove(topic).expect("present");
            registry.retired_totals.add(&t.counters.load());
        }
    }

    pub fn unregister_subscriber(&self, topic: &str, id: SubscriberId) -> Result<Vec<ArenaRef>, BrokerError> {
        let mut m = self.membership();
        let t = m
            .registry
            .topics
            .get_mut(topic)
            .ok_or_else(|| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        let st = t.state.get_mut();
        st.remove_subscriber(id)
            .ok_or_else(|| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        let mut evicted = Vec::new();
        st.sweep_all(&mut evicted);
        t.counters.membership_ops.fetch_add(1, Ordering::Relaxed);
        Self::drop_if_empty(&mut m.registry, topic);
        Ok(evicted)
    }

    pub fn unregister_publisher(&self, topic: &str, id: PublisherId) -> Result<Vec<ArenaRef>, BrokerError> {
        let mut m = self.membership();
        let t = m
            .registry
            .topics
            .get_mut(topic)
            .ok_or_else(|| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        let st = t.state.get_mut();
        st.remove_publisher(id)
            .ok_or_else(|| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        let mut evicted = Vec::new();
        st.sweep_all(&mut evicted);
        t.counters.membership_ops.fetch_add(1, Ordering::Relaxed);
        Self::drop_if_empty(&mut m.registry, topic);
        Ok(evicted)
    }

    /// Inserts an entry for `payload` and evicts this publisher's reclaimable
    /// entries. Returns the subscribers to notify.
    pub fn publish_entry(
        &self,
        topic: &str,
        publisher: PublisherId,
        payload: ArenaRef,
    ) -> Result<PublishOutcome, BrokerError> {
        let registry = self.data_path();
        let t = registry
            .topics
            .get(topic)
            .ok_or_else(|| BrokerError::TopicGone(topic.to_owned()))?;
        let mut st = t.state.write();
        self.record(OpClass::Publish, LockMode::Read, Some(LockMode::Write));
        if !st.publishers.contains_key(&publisher) {
            return Err(BrokerError::UnknownEndpoint(topic.to_owned()));
        }
        let entry_id = EntryId(st.next_entry_id);
        st.next_entry_id += 1;
        st.entries.insert(
            entry_id,
            EntryRecord {
                payload,
                publisher,
                bitmap: AtomicBitmap::new(self.width()),
            },
        );
        st.owned.entry(publisher).or_default().insert(entry_id);
        let mut evicted = Vec::new();
        st.sweep_publisher(publisher, &mut evicted);
        let subscribers = st.subscribers.keys().copied().collect();
        t.counters.publish_ops.fetch_add(1, Ordering::Relaxed);
        Ok(PublishOutcome {
            entry_id,
            subscribers,
            evicted,
        })
    }

    /// Returns every entry newer than the subscriber's watermark, setting the
    /// subscriber's bit on each and advancing the watermark.
    ///
    /// At most one receive per subscriber may be in flight.
    pub fn receive_entries(&self, topic: &str, subscriber: SubscriberId) -> Result<Vec<Delivery>, BrokerError> {
        let registry = self.data_path();
        let t = registry
            .topics
            .get(topic)
            .ok_or_else(|| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        let st = t.state.read();
        self.record(OpClass::Receive, LockMode::Read, Some(LockMode::Read));
        let sub = st
            .subscribers
            .get(&subscriber)
            .ok_or_else(|| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        if let Some(probe) = &self.config.receive_probe {
            probe(topic, subscriber);
        }
        let watermark = sub.watermark.load(Ordering::Acquire);
        let bit = subscriber.0 as usize;
        let out: Vec<Delivery> = st
            .entries
            .range(EntryId(watermark + 1)..)
            .map(|(id, e)| {
                e.bitmap.test_and_set(bit);
                Delivery {
                    entry_id: *id,
                    payload: e.payload,
                }
            })
            .collect();
        if let Some(last) = out.last() {
            sub.watermark.fetch_max(last.entry_id.0, Ordering::AcqRel);
            t.counters.receive_bit_sets.fetch_add(out.len() as u64, Ordering::Relaxed);
        }
        Ok(out)
    }

    /// Clears the subscriber's bit on `entry`. Never deallocates; the entry
    /// becomes evictable at the publisher's next publish or at the next
    /// membership change.
    pub fn release_reference(&self, topic: &str, subscriber: SubscriberId, entry: EntryId) -> Result<(), BrokerError> {
        let registry = self.data_path();
        let t = registry
            .topics
            .get(topic)
            .ok_or_else(|| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        let st = t.state.read();
        self.record(OpClass::Release, LockMode::Read, Some(LockMode::Read));
        if !st.subscribers.contains_key(&subscriber) {
            return Err(BrokerError::UnknownEndpoint(topic.to_owned()));
        }
        let e = st.entries.get(&entry).ok_or_else(|| BrokerError::UnknownEntry {
            topic: topic.to_owned(),
            entry,
        })?;
        if !e.bitmap.test_and_clear(subscriber.0 as usize) {
            return Err(BrokerError::BitNotSet { subscriber, entry });
        }
        t.counters.release_bit_clears.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Removes every endpoint owned by `pid`, clears its bits everywhere and
    /// evicts what became reclaimable. Transient Local entries of a departed
    /// publisher stay under broker ownership. Unknown pids are a no-op.
    pub fn handle_process_exit(&self, pid: Pid) -> Vec<ArenaRef> {
        let mut m = self.membership();
        let mut evicted = Vec::new();
        let mut touched = Vec::new();
        for (name, t) in m.registry.topics.iter_mut() {
            let st = t.state.get_mut();
            let subs: Vec<_> = st
                .subscribers
                .iter()
                .filter(|(_, s)| s.pid == pid)
                .map(|(id, _)| *id)
                .collect();
            let pubs: Vec<_> = st
                .publishers
                .iter()
                .filter(|(_, p)| p.pid == pid)
                .map(|(id, _)| *id)
                .collect();
            if subs.is_empty() && pubs.is_empty() {
                continue;
            }
            for id in &subs {
                st.remove_subscriber(*id);
            }
            for id in &pubs {
                st.remove_publisher(*id);
            }
            st.sweep_all(&mut evicted);
            t.counters
                .membership_ops
                .fetch_add((subs.len() + pubs.len()) as u64, Ordering::Relaxed);
            touched.push(name.clone());
        }
        for name in touched {
            Self::drop_if_empty(&mut m.registry, &name);
        }
        evicted
    }

    /// Consistent read-only view of one topic or all topics.
    pub fn snapshot(&self, topic: Option<&str>) -> Result<Snapshot, BrokerError> {
        let registry = self.registry.read();
        let mut names: Vec<&String> = match topic {
            Some(name) => {
                let (k, _) = registry
                    .topics
                    .get_key_value(name)
                    .ok_or_else(|| BrokerError::UnknownTopic(name.to_owned()))?;
                vec![k]
            }
            None => registry.topics.keys().collect(),
        };
        names.sort();
        let mut totals = registry.retired_totals;
        for t in registry.topics.values() {
            totals.add(&t.counters.load());
        }
        let topics = names
            .into_iter()
            .map(|name| {
                let t = &registry.topics[name];
                let st = t.state.read();
                let mut publishers: Vec<PublisherSnapshot> = st
                    .publishers
                    .iter()
                    .map(|(id, p)| (id, p, false))
                    .chain(st.departed.iter().map(|(id, p)| (id, p, true)))
                    .map(|(id, p, departed)| PublisherSnapshot {
                        id: *id,
                        pid: p.pid,
                        qos: p.qos,
                        departed,
                    })
                    .collect();
                publishers.sort_by_key(|p| p.id);
                TopicSnapshot {
                    name: name.clone(),
                    next_entry_id: EntryId(st.next_entry_id),
                    next_publisher_id: st.next_publisher_id,
                    next_subscriber_id: st.next_subscriber_id,
                    publishers,
                    subscribers: st
                        .subscribers
                        .iter()
                        .map(|(id, s)| SubscriberSnapshot {
                            id: *id,
                            pid: s.pid,
                            qos: s.qos,
                            watermark: EntryId(s.watermark.load(Ordering::Acquire)),
                        })
                        .collect(),
                    entries: st
                        .entries
                        .iter()
                        .map(|(id, e)| EntrySnapshot {
                            entry_id: *id,
                            publisher: e.publisher,
                            payload: e.payload,
                            holders: e.bitmap.ones().into_iter().map(SubscriberId).collect(),
                        })
                        .collect(),
                    counters: t.counters.load(),
                }
            })
            .collect();
        Ok(Snapshot { topics, totals })
    }

    /// Aggregate counters across all topics, including removed ones.
    pub fn counters(&self) -> UpdateCounters {
        let registry = self.registry.read();
        let mut totals = registry.retired_totals;
        for t in registry.topics.values() {
            totals.add(&t.counters.load());
        }
        totals
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub topics: Vec<TopicSnapshot>,
    pub totals: UpdateCounters,
}

impl Snapshot {
    pub fn topic(&self, name: &str) -> Option<&TopicSnapshot> {
        self.topics.iter().find(|t| t.name == name)
    }

    /// Payload refs of every entry across all topics.
    pub fn payloads(&self) -> Vec<ArenaRef> {
        self.topics
            .iter()
            .flat_map(|t| t.entries.iter().map(|e| e.payload))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicSnapshot {
    pub name: String,
    pub next_entry_id: EntryId,
    pub next_publisher_id: u32,
    pub next_subscriber_id: u32,
    pub publishers: Vec<PublisherSnapshot>,
    pub subscribers: Vec<SubscriberSnapshot>,
    pub entries: Vec<EntrySnapshot>,
    pub counters: UpdateCounters,
}

impl TopicSnapshot {
    pub fn entry_ids(&self) -> Vec<EntryId> {
        self.entries.iter().map(|e| e.entry_id).collect()
    }

    pub fn entry(&self, id: EntryId) -> Option<&EntrySnapshot> {
        self.entries.iter().find(|e| e.entry_id == id)
    }

    pub fn subscriber(&self, id: SubscriberId) -> Option<&SubscriberSnapshot> {
        self.subscribers.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublisherSnapshot {
    pub id: PublisherId,
    pub pid: Pid,
    pub qos: Qos,
    /// The publisher left; its retained entries are broker-owned.
    pub departed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriberSnapshot {
    pub id: SubscriberId,
    pub pid: Pid,
    pub qos: Qos,
    pub watermark: EntryId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntrySnapshot {
    pub entry_id: EntryId,
    pub publisher: PublisherId,
    pub payload: ArenaRef,
    pub holders: Vec<SubscriberId>,
}

/// The metadata operations a client library issues, whether the broker is
/// in-process or reached over a socket.
pub trait MetadataPort: Send + Sync {
    fn register_publisher(&self, topic: &str, qos: Qos, pid: Pid) -> Result<PublisherId, BrokerError>;
    fn register_subscriber(&self, topic: &str, qos: Qos, pid: Pid) -> Result<SubscriberRegistration, BrokerError>;
    fn unregister_publisher(&self, topic: &str, id: PublisherId) -> Result<Vec<ArenaRef>, BrokerError>;
    fn unregister_subscriber(&self, topic: &str, id: SubscriberId) -> Result<Vec<ArenaRef>, BrokerError>;
    fn publish_entry(&self, topic: &str, publisher: PublisherId, payload: ArenaRef)
        -> Result<PublishOutcome, BrokerError>;
    fn receive_entries(&self, topic: &str, subscriber: SubscriberId) -> Result<Vec<Delivery>, BrokerError>;
    fn release_reference(&self, topic: &str, subscriber: SubscriberId, entry: EntryId) -> Result<(), BrokerError>;
    /// Announces that `pid` is gone. A remote port does this by closing its
    /// connection, which the broker treats as the exit.
    fn process_exit(&self, pid: Pid) -> Result<Vec<ArenaRef>, BrokerError>;
}

impl MetadataPort for Broker {
    fn register_publisher(&self, topic: &str, qos: Qos, pid: Pid) -> Result<PublisherId, BrokerError> {
        Broker::register_publisher(self, topic, qos, pid)
    }
    fn register_subscriber(&self, topic: &str, qos: Qos, pid: Pid) -> Result<SubscriberRegistration, BrokerError> {
        Broker::register_subscriber(self, topic, qos, pid)
    }
    fn unregister_publisher(&self, topic: &str, id: PublisherId) -> Result<Vec<ArenaRef>, BrokerError> {
        Broker::unregister_publisher(self, topic, id)
    }
    fn unregister_subscriber(&self, topic: &str, id: SubscriberId) -> Result<Vec<ArenaRef>, BrokerError> {
        Broker::unregister_subscriber(self, topic, id)
    }
    fn publish_entry(
        &self,
        topic: &str,
        publisher: PublisherId,
        payload: ArenaRef,
    ) -> Result<PublishOutcome, BrokerError> {
        Broker::publish_entry(self, topic, publisher, payload)
    }
    fn receive_entries(&self, topic: &str, subscriber: SubscriberId) -> Result<Vec<Delivery>, BrokerError> {
        Broker::receive_entries(self, topic, subscriber)
    }
    fn release_reference(&self, topic: &str, subscriber: SubscriberId, entry: EntryId) -> Result<(), BrokerError> {
        Broker::release_reference(self, topic, subscriber, entry)
    }
    fn process_exit(&self, pid: Pid) -> Result<Vec<ArenaRef>, BrokerError> {
        Ok(self.handle_process_exit(pid))
    }
}

#[cfg(test)]
mod tests;
