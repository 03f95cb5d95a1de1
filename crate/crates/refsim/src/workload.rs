//! Seeded random operation sequences and a step-by-step comparison driver.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use pubsub_core::arena::ArenaRef;
use pubsub_core::broker::{Broker, BrokerError, MetadataPort, Snapshot};
use pubsub_core::types::{EntryId, Pid, PublisherId, Qos, SubscriberId};

use crate::{RefSim, SimError};

pub const TOPICS: [&str; 3] = ["alpha", "beta", "gamma"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    RegisterPub { topic: usize, qos: Qos, pid: Pid },
    RegisterSub { topic: usize, qos: Qos, pid: Pid },
    UnregisterPub { topic: usize, id: u32 },
    UnregisterSub { topic: usize, id: u32 },
    Publish { topic: usize, id: u32, payload: ArenaRef },
    Receive { topic: usize, id: u32 },
    Release { topic: usize, id: u32, entry: u64 },
    Crash { pid: Pid },
}

#[derive(Debug, Clone, Copy)]
pub struct WorkloadShape {
    pub max_messages: usize,
    pub max_endpoints: usize,
    pub pids: u32,
    pub max_depth: u32,
}

impl Default for WorkloadShape {
    fn default() -> Self {
        Self {
            max_messages: 200,
            max_endpoints: 10,
            pids: 4,
            max_depth: 4,
        }
    }
}

fn random_qos(rng: &mut StdRng, max_depth: u32) -> Qos {
    let depth = rng.gen_range(1..=max_depth);
    if rng.gen_bool(0.5) {
        Qos::transient_local(depth)
    } else {
        Qos::volatile(depth)
    }
}

/// Generates a sequence by driving a private simulator, so that most
/// operations target endpoints and entries that exist; a small share is
/// deliberately invalid to exercise error paths.
pub fn generate(seed: u64, shape: WorkloadShape) -> Vec<Op> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut sim = RefSim::new(64);
    let mut ops = Vec::new();
    let mut messages = 0;
    let mut payload_seq = 0u64;
    let mut guard = 0;
    while messages < shape.max_messages && guard < shape.max_messages * 20 {
        guard += 1;
        let topic = rng.gen_range(0..TOPICS.len());
        let name = TOPICS[topic];
        let pubs = sim.publishers(name);
        let subs = sim.subscribers(name);
        let roll = rng.gen_range(0..100);
        let op = match roll {
            0..=7 if sim.endpoint_count() < shape.max_endpoints => Op::RegisterPub {
                topic,
                qos: random_qos(&mut rng, shape.max_depth),
                pid: Pid(rng.gen_range(1..=shape.pids)),
            },
            8..=17 if sim.endpoint_count() < shape.max_endpoints => Op::RegisterSub {
                topic,
                qos: random_qos(&mut rng, shape.max_depth),
                pid: Pid(rng.gen_range(1..=shape.pids)),
            },
            18..=20 if !pubs.is_empty() => Op::UnregisterPub {
                topic,
                id: pubs[rng.gen_range(0..pubs.len())],
            },
            21..=24 if !subs.is_empty() => Op::UnregisterSub {
                topic,
                id: subs[rng.gen_range(0..subs.len())],
            },
            25..=54 if !pubs.is_empty() => {
                let id = pubs[rng.gen_range(0..pubs.len())];
                let pid = sim.publisher_pid(name, id).expect("live");
                payload_seq += 1;
                Op::Publish {
                    topic,
                    id,
                    payload: ArenaRef {
                        arena_id: pid.0 as u64,
                        offset: payload_seq * 64,
                        length: 64,
                    },
                }
            }
            55..=74 if !subs.is_empty() => Op::Receive {
                topic,
                id: subs[rng.gen_range(0..subs.len())],
            },
            75..=92 if !subs.is_empty() => {
                let id = subs[rng.gen_range(0..subs.len())];
                let held = sim.holdings(name, id);
                if held.is_empty() {
                    continue;
                }
                Op::Release {
                    topic,
                    id,
                    entry: held[rng.gen_range(0..held.len())],
                }
            }
            93..=95 => Op::Crash {
                pid: Pid(rng.gen_range(1..=shape.pids)),
            },
            96 => Op::Publish {
                topic,
                id: rng.gen_range(0..4),
                payload: ArenaRef {
                    arena_id: 0,
                    offset: 0,
                    length: 1,
                },
            },
            97 => Op::Release {
                topic,
                id: rng.gen_range(0..4),
                entry: rng.gen_range(0..8),
            },
            98 => Op::UnregisterSub {
                topic,
                id: rng.gen_range(0..8),
            },
            99 => Op::Receive {
                topic,
                id: rng.gen_range(0..8),
            },
            _ => continue,
        };
        if let Op::Publish { .. } = op {
            messages += 1;
        }
        apply_sim(&mut sim, &op);
        ops.push(op);
    }
    ops
}

/// Result of one operation, normalized so that the simulator and the broker
/// can be compared. Evicted payload lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Publisher(u32),
    Subscriber { id: u32, watermark: u64 },
    Evicted(Vec<ArenaRef>),
    Published { entry: u64, subscribers: Vec<u32>, evicted: Vec<ArenaRef> },
    Delivered(Vec<(u64, ArenaRef)>),
    Released,
    Failed(SimError),
}

fn sorted(mut v: Vec<ArenaRef>) -> Vec<ArenaRef> {
    v.sort();
    v
}

pub fn apply_sim(sim: &mut RefSim, op: &Op) -> Outcome {
    let r = match op {
        Op::RegisterPub { topic, qos, pid } => sim.register_publisher(TOPICS[*topic], *qos, *pid).map(Outcome::Publisher),
        Op::RegisterSub { topic, qos, pid } => sim
            .register_subscriber(TOPICS[*topic], *qos, *pid)
            .map(|(id, watermark)| Outcome::Subscriber { id, watermark }),
        Op::UnregisterPub { topic, id } => sim.unregister_publisher(TOPICS[*topic], *id).map(|v| Outcome::Evicted(sorted(v))),
        Op::UnregisterSub { topic, id } => sim.unregister_subscriber(TOPICS[*topic], *id).map(|v| Outcome::Evicted(sorted(v))),
        Op::Publish { topic, id, payload } => {
            sim.publish(TOPICS[*topic], *id, *payload)
                .map(|(entry, subscribers, evicted)| Outcome::Published {
                    entry,
                    subscribers,
                    evicted: sorted(evicted),
                })
        }
        Op::Receive { topic, id } => sim.receive(TOPICS[*topic], *id).map(Outcome::Delivered),
        Op::Release { topic, id, entry } => sim.release(TOPICS[*topic], *id, *entry).map(|_| Outcome::Released),
        Op::Crash { pid } => Ok(Outcome::Evicted(sorted(sim.crash(*pid)))),
    };
    r.unwrap_or_else(Outcome::Failed)
}

pub fn sim_error(e: &BrokerError) -> SimError {
    match e {
        BrokerError::IdSpaceExhausted { .. } => SimError::IdSpaceExhausted,
        BrokerError::UnknownEndpoint(_) => SimError::UnknownEndpoint,
        BrokerError::TopicGone(_) => SimError::TopicGone,
        BrokerError::UnknownEntry { .. } => SimError::UnknownEntry,
        BrokerError::BitNotSet { .. } => SimError::BitNotSet,
        BrokerError::InvalidTopicName => SimError::InvalidTopicName,
        BrokerError::InvalidQos => SimError::InvalidQos,
        other => panic!("transport-level error in comparison run: {other}"),
    }
}

/// Applies `op` through any metadata port. `exit` performs a crash, since
/// only the in-process broker can be asked to clean up an arbitrary pid.
pub fn apply_port(
    port: &dyn MetadataPort,
    op: &Op,
    exit: &mut dyn FnMut(Pid) -> Vec<ArenaRef>,
) -> Outcome {
    let r = match op {
        Op::RegisterPub { topic, qos, pid } => port
            .register_publisher(TOPICS[*topic], *qos, *pid)
            .map(|id| Outcome::Publisher(id.0)),
        Op::RegisterSub { topic, qos, pid } => port
            .register_subscriber(TOPICS[*topic], *qos, *pid)
            .map(|r| Outcome::Subscriber {
                id: r.id.0,
                watermark: r.initial_watermark.0,
            }),
        Op::UnregisterPub { topic, id } => port
            .unregister_publisher(TOPICS[*topic], PublisherId(*id))
            .map(|v| Outcome::Evicted(sorted(v))),
        Op::UnregisterSub { topic, id } => port
            .unregister_subscriber(TOPICS[*topic], SubscriberId(*id))
            .map(|v| Outcome::Evicted(sorted(v))),
        Op::Publish { topic, id, payload } => port
            .publish_entry(TOPICS[*topic], PublisherId(*id), *payload)
            .map(|o| Outcome::Published {
                entry: o.entry_id.0,
                subscribers: o.subscribers.iter().map(|s| s.0).collect(),
                evicted: sorted(o.evicted),
            }),
        Op::Receive { topic, id } => port
            .receive_entries(TOPICS[*topic], SubscriberId(*id))
            .map(|ds| Outcome::Delivered(ds.iter().map(|d| (d.entry_id.0, d.payload)).collect())),
        Op::Release { topic, id, entry } => port
            .release_reference(TOPICS[*topic], SubscriberId(*id), EntryId(*entry))
            .map(|_| Outcome::Released),
        Op::Crash { pid } => Ok(Outcome::Evicted(sorted(exit(*pid)))),
    };
    r.unwrap_or_else(|e| Outcome::Failed(sim_error(&e)))
}

pub fn apply_broker(broker: &Broker, op: &Op) -> Outcome {
    apply_port(broker, op, &mut |pid| broker.handle_process_exit(pid))
}

/// Describes the first difference between a broker snapshot and the
/// simulator's entry trees and watermarks, if any.
pub fn diff_state(snapshot: &Snapshot, sim: &RefSim) -> Option<String> {
    let names: Vec<String> = snapshot.topics.iter().map(|t| t.name.clone()).collect();
    if names != sim.topic_names() {
        return Some(format!("topics {names:?} vs {:?}", sim.topic_names()));
    }
    for t in &snapshot.topics {
        let ours: Vec<(u64, u32, ArenaRef, Vec<u32>)> = t
            .entries
            .iter()
            .map(|e| (e.entry_id.0, e.publisher.0, e.payload, e.holders.iter().map(|h| h.0).collect()))
            .collect();
        let theirs: Vec<(u64, u32, ArenaRef, Vec<u32>)> = sim
            .entries(&t.name)
            .into_iter()
            .map(|e| (e.id, e.publisher, e.payload, e.holders))
            .collect();
        if ours != theirs {
            return Some(format!("topic {}: entries {ours:?} vs {theirs:?}", t.name));
        }
        for s in &t.subscribers {
            if sim.watermark(&t.name, s.id.0) != Some(s.watermark.0) {
                return Some(format!(
                    "topic {} {}: watermark {} vs {:?}",
                    t.name,
                    s.id,
                    s.watermark.0,
                    sim.watermark(&t.name, s.id.0)
                ));
            }
        }
        let sim_subs = sim.subscribers(&t.name);
        let subs: Vec<u32> = t.subscribers.iter().map(|s| s.id.0).collect();
        if subs != sim_subs {
            return Some(format!("topic {}: subscribers {subs:?} vs {sim_subs:?}", t.name));
        }
    }
    None
}
