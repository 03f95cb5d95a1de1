//! Naive single-threaded model of the broker's entry bookkeeping.
//!
//! Everything is stored as plain vectors and recomputed from scratch:
//! subscribers carry explicit sets of the entries they hold (instead of
//! per-entry bitmaps), and the number of newer entries is counted by
//! scanning. It exists only to be compared against the real broker.

use std::collections::{BTreeMap, BTreeSet};

use pubsub_core::arena::ArenaRef;
use pubsub_core::types::{Durability, Pid, Qos};

pub mod workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimError {
    IdSpaceExhausted,
    UnknownEndpoint,
    TopicGone,
    UnknownEntry,
    BitNotSet,
    InvalidTopicName,
    InvalidQos,
}

#[derive(Debug, Clone)]
struct SimPublisher {
    id: u32,
    pid: Pid,
    qos: Qos,
    alive: bool,
}

#[derive(Debug, Clone)]
struct SimSubscriber {
    id: u32,
    pid: Pid,
    watermark: u64,
    holding: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEntry {
    pub id: u64,
    pub publisher: u32,
    pub payload: ArenaRef,
}

#[derive(Debug, Clone, Default)]
struct SimTopic {
    last_entry: u64,
    publishers_allocated: u32,
    subscribers_allocated: u32,
    publishers: Vec<SimPublisher>,
    subscribers: Vec<SimSubscriber>,
    entries: Vec<SimEntry>,
}

/// Entry as seen from outside: id, publisher, payload and holder ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEntryView {
    pub id: u64,
    pub publisher: u32,
    pub payload: ArenaRef,
    pub holders: Vec<u32>,
}

impl SimTopic {
    fn held(&self, entry: u64) -> bool {
        self.subscribers.iter().any(|s| s.holding.contains(&entry))
    }

    fn retained_depth(&self, publisher: u32) -> u64 {
        match self.publishers.iter().find(|p| p.id == publisher) {
            Some(p) if p.alive => p.qos.depth as u64,
            Some(p) if p.qos.durability == Durability::TransientLocal => p.qos.depth as u64,
            _ => 0,
        }
    }

    fn newer_from_same(&self, entry: &SimEntry) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.publisher == entry.publisher && e.id > entry.id)
            .count() as u64
    }

    fn evict(&mut self, only: Option<u32>) -> Vec<ArenaRef> {
        let doomed: Vec<u64> = self
            .entries
            .iter()
            .filter(|e| only.is_none_or(|p| e.publisher == p))
            .filter(|e| !self.held(e.id) && self.newer_from_same(e) >= self.retained_depth(e.publisher))
            .map(|e| e.id)
            .collect();
        let mut out = Vec::new();
        self.entries.retain(|e| {
            if doomed.contains(&e.id) {
                out.push(e.payload);
                false
            } else {
                true
            }
        });
        let entries = &self.entries;
        self.publishers
            .retain(|p| p.alive || entries.iter().any(|e| e.publisher == p.id));
        out
    }

    fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.subscribers.is_empty() && !self.publishers.iter().any(|p| p.alive)
    }

    fn join_watermark(&self, qos: Qos) -> u64 {
        if qos.durability == Durability::Volatile {
            return self.last_entry;
        }
        let mut retained: Vec<u64> = Vec::new();
        for p in &self.publishers {
            if p.qos.durability != Durability::TransientLocal {
                continue;
            }
            let mut mine: Vec<u64> = self.entries.iter().filter(|e| e.publisher == p.id).map(|e| e.id).collect();
            mine.sort_unstable_by(|a, b| b.cmp(a));
            retained.extend(mine.into_iter().take(p.qos.depth as usize));
        }
        retained.sort_unstable();
        let k = retained.len().min(qos.depth as usize);
        if k == 0 {
            self.last_entry
        } else {
            retained[retained.len() - k] - 1
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefSim {
    width: u32,
    topics: BTreeMap<String, SimTopic>,
}

impl RefSim {
    pub fn new(width: u32) -> Self {
        Self {
            width,
            topics: BTreeMap::new(),
        }
    }

    fn check(topic: &str, qos: Qos) -> Result<(), SimError> {
        if topic.is_empty() || topic.len() > 255 {
            return Err(SimError::InvalidTopicName);
        }
        if qos.depth == 0 {
            return Err(SimError::InvalidQos);
        }
        Ok(())
    }

    fn drop_if_empty(&mut self, topic: &str) {
        if self.topics.get(topic).is_some_and(|t| t.is_empty()) {
            self.topics.remove(topic);
        }
    }

    pub fn register_publisher(&mut self, topic: &str, qos: Qos, pid: Pid) -> Result<u32, SimError> {
        Self::check(topic, qos)?;
        let width = self.width;
        let t = self.topics.entry(topic.to_owned()).or_default();
        if t.publishers_allocated >= width {
            return Err(SimError::IdSpaceExhausted);
        }
        let id = t.publishers_allocated;
        t.publishers_allocated += 1;
        t.publishers.push(SimPublisher {
            id,
            pid,
            qos,
            alive: true,
        });
        Ok(id)
    }

    /// Returns (subscriber id, initial watermark).
    pub fn register_subscriber(&mut self, topic: &str, qos: Qos, pid: Pid) -> Result<(u32, u64), SimError> {
        Self::check(topic, qos)?;
        let width = self.width;
        let t = self.topics.entry(topic.to_owned()).or_default();
        if t.subscribers_allocated >= width {
            return Err(SimError::IdSpaceExhausted);
        }
        let id = t.subscribers_allocated;
        t.subscribers_allocated += 1;
        let watermark = t.join_watermark(qos);
        t.subscribers.push(SimSubscriber {
            id,
            pid,
            watermark,
            holding: BTreeSet::new(),
        });
        Ok((id, watermark))
    }

    pub fn unregister_subscriber(&mut self, topic: &str, id: u32) -> Result<Vec<ArenaRef>, SimError> {
        let t = self.topics.get_mut(topic).ok_or(SimError::UnknownEndpoint)?;
        let before = t.subscribers.len();
        t.subscribers.retain(|s| s.id != id);
        if t.subscribers.len() == before {
            return Err(SimError::UnknownEndpoint);
        }
        let out = t.evict(None);
        self.drop_if_empty(topic);
        Ok(out)
    }

    pub fn unregister_publisher(&mut self, topic: &str, id: u32) -> Result<Vec<ArenaRef>, SimError> {
        let t = self.topics.get_mut(topic).ok_or(SimError::UnknownEndpoint)?;
        let p = t
            .publishers
            .iter_mut()
            .find(|p| p.id == id && p.alive)
            .ok_or(SimError::UnknownEndpoint)?;
        p.alive = false;
        let out = t.evict(None);
        self.drop_if_empty(topic);
        Ok(out)
    }

    /// Returns (entry id, subscriber ids, evicted payloads).
    pub fn publish(&mut self, topic: &str, publisher: u32, payload: ArenaRef) -> Result<(u64, Vec<u32>, Vec<ArenaRef>), SimError> {
        let t = self.topics.get_mut(topic).ok_or(SimError::TopicGone)?;
        if !t.publishers.iter().any(|p| p.id == publisher && p.alive) {
            return Err(SimError::UnknownEndpoint);
        }
        t.last_entry += 1;
        let id = t.last_entry;
        t.entries.push(SimEntry { id, publisher, payload });
        let evicted = t.evict(Some(publisher));
        let mut subs: Vec<u32> = t.subscribers.iter().map(|s| s.id).collect();
        subs.sort_unstable();
        Ok((id, subs, evicted))
    }

    /// Returns (entry id, payload) pairs delivered.
    pub fn receive(&mut self, topic: &str, subscriber: u32) -> Result<Vec<(u64, ArenaRef)>, SimError> {
        let t = self.topics.get_mut(topic).ok_or(SimError::UnknownEndpoint)?;
        let entries = t.entries.clone();
        let s = t
            .subscribers
            .iter_mut()
            .find(|s| s.id == subscriber)
            .ok_or(SimError::UnknownEndpoint)?;
        let out: Vec<(u64, ArenaRef)> = entries
            .iter()
            .filter(|e| e.id > s.watermark)
            .map(|e| (e.id, e.payload))
            .collect();
        for (id, _) in &out {
            s.holding.insert(*id);
            s.watermark = s.watermark.max(*id);
        }
        Ok(out)
    }

    pub fn release(&mut self, topic: &str, subscriber: u32, entry: u64) -> Result<(), SimError> {
        let t = self.topics.get_mut(topic).ok_or(SimError::UnknownEndpoint)?;
        if !t.subscribers.iter().any(|s| s.id == subscriber) {
            return Err(SimError::UnknownEndpoint);
        }
        if !t.entries.iter().any(|e| e.id == entry) {
            return Err(SimError::UnknownEntry);
        }
        let s = t.subscribers.iter_mut().find(|s| s.id == subscriber).expect("checked");
        if !s.holding.remove(&entry) {
            return Err(SimError::BitNotSet);
        }
        Ok(())
    }

    pub fn crash(&mut self, pid: Pid) -> Vec<ArenaRef> {
        let mut out = Vec::new();
        let names: Vec<String> = self.topics.keys().cloned().collect();
        for name in names {
            let t = self.topics.get_mut(&name).expect("present");
            let owns = t.subscribers.iter().any(|s| s.pid == pid) || t.publishers.iter().any(|p| p.alive && p.pid == pid);
            if !owns {
                continue;
            }
            t.subscribers.retain(|s| s.pid != pid);
            for p in t.publishers.iter_mut().filter(|p| p.pid == pid) {
                p.alive = false;
            }
            out.extend(t.evict(None));
            self.drop_if_empty(&name);
        }
        out
    }

    pub fn topic_names(&self) -> Vec<String> {
        self.topics.keys().cloned().collect()
    }

    /// Entries of `topic` in id order; empty if the topic does not exist.
    pub fn entries(&self, topic: &str) -> Vec<SimEntryView> {
        let Some(t) = self.topics.get(topic) else {
            return Vec::new();
        };
        let mut v: Vec<SimEntryView> = t
            .entries
            .iter()
            .map(|e| SimEntryView {
                id: e.id,
                publisher: e.publisher,
                payload: e.payload,
                holders: t
                    .subscribers
                    .iter()
                    .filter(|s| s.holding.contains(&e.id))
                    .map(|s| s.id)
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            })
            .collect();
        v.sort_by_key(|e| e.id);
        v
    }

    pub fn watermark(&self, topic: &str, subscriber: u32) -> Option<u64> {
        self.topics
            .get(topic)?
            .subscribers
            .iter()
            .find(|s| s.id == subscriber)
            .map(|s| s.watermark)
    }

    /// Live publisher ids of `topic`.
    pub fn publishers(&self, topic: &str) -> Vec<u32> {
        self.topics
            .get(topic)
            .map(|t| t.publishers.iter().filter(|p| p.alive).map(|p| p.id).collect())
            .unwrap_or_default()
    }

    pub fn subscribers(&self, topic: &str) -> Vec<u32> {
        self.topics
            .get(topic)
            .map(|t| t.subscribers.iter().map(|s| s.id).collect())
            .unwrap_or_default()
    }

    /// Entries currently held by a subscriber.
    pub fn holdings(&self, topic: &str, subscriber: u32) -> Vec<u64> {
        self.topics
            .get(topic)
            .and_then(|t| t.subscribers.iter().find(|s| s.id == subscriber))
            .map(|s| s.holding.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Number of live endpoints across all topics.
    pub fn endpoint_count(&self) -> usize {
        self.topics
            .values()
            .map(|t| t.subscribers.len() + t.publishers.iter().filter(|p| p.alive).count())
            .sum()
    }

    /// Pid of a live publisher.
    pub fn publisher_pid(&self, topic: &str, id: u32) -> Option<Pid> {
        self.topics
            .get(topic)?
            .publishers
            .iter()
            .find(|p| p.alive && p.id == id)
            .map(|p| p.pid)
    }

    /// Total entries over all topics.
    pub fn entry_count(&self) -> usize {
        self.topics.values().map(|t| t.entries.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(i: u64) -> ArenaRef {
        ArenaRef {
            arena_id: 1,
            offset: i * 8,
            length: 8,
        }
    }

    #[test]
    fn depth_three_keeps_newest_three() {
        let mut s = RefSim::new(64);
        let p = s.register_publisher("t", Qos::volatile(3), Pid(1)).unwrap();
        for i in 1..=5 {
            s.publish("t", p, r(i)).unwrap();
        }
        let ids: Vec<u64> = s.entries("t").iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![3, 4, 5]);
    }

    #[test]
    fn transient_local_depth_one_joiner_sees_newest() {
        let mut s = RefSim::new(64);
        let p = s.register_publisher("t", Qos::transient_local(2), Pid(1)).unwrap();
        for i in 1..=5 {
            s.publish("t", p, r(i)).unwrap();
        }
        let (id, _) = s.register_subscriber("t", Qos::transient_local(1), Pid(2)).unwrap();
        let got: Vec<u64> = s.receive("t", id).unwrap().into_iter().map(|(e, _)| e).collect();
        assert_eq!(got, vec![5]);
    }

    #[test]
    fn held_entries_survive_and_release_needs_hold() {
        let mut s = RefSim::new(64);
        let p = s.register_publisher("t", Qos::volatile(1), Pid(1)).unwrap();
        let (sub, _) = s.register_subscriber("t", Qos::volatile(1), Pid(2)).unwrap();
        s.publish("t", p, r(1)).unwrap();
        s.receive("t", sub).unwrap();
        s.publish("t", p, r(2)).unwrap();
        assert_eq!(s.entry_count(), 2);
        s.release("t", sub, 1).unwrap();
        assert_eq!(s.release("t", sub, 1), Err(SimError::BitNotSet));
        let (_, _, evicted) = s.publish("t", p, r(3)).unwrap();
        assert_eq!(evicted, vec![r(1), r(2)]);
    }

    #[test]
    fn crash_of_volatile_publisher_empties_topic() {
        let mut s = RefSim::new(64);
        let p = s.register_publisher("t", Qos::volatile(4), Pid(1)).unwrap();
        s.publish("t", p, r(1)).unwrap();
        assert_eq!(s.crash(Pid(1)), vec![r(1)]);
        assert!(s.topic_names().is_empty());
    }
}
