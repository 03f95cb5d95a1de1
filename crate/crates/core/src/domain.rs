//! Single-process deployment: one broker, in-process arenas, in-process
//! wakeup queues, and any number of logical participants.
//!
//! Each participant gets its own poisoning arena keyed by its pid. Arenas
//! outlive their participant so that retained history stays readable after
//! the publisher crashes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::arena::{Arena, ArenaDirectory, ArenaError, ArenaRef, ArenaStats};
use crate::broker::{Broker, BrokerConfig};
use crate::client::{Participant, ParticipantParts, Reclaimer};
use crate::notify::{Notifier, NotifyHub, NotifyStats};
use crate::types::Pid;

pub const DEFAULT_ARENA_CAPACITY: u64 = 1 << 20;

pub struct Domain {
    broker: Arc<Broker>,
    hub: Arc<NotifyHub>,
    arenas: RwLock<BTreeMap<u64, Arc<Arena>>>,
    arena_capacity: u64,
    next_pid: AtomicU32,
}

impl Domain {
    pub fn new(config: BrokerConfig) -> Arc<Self> {
        Self::with_arena_capacity(config, DEFAULT_ARENA_CAPACITY)
    }

    pub fn with_arena_capacity(config: BrokerConfig, arena_capacity: u64) -> Arc<Self> {
        Arc::new(Self {
            broker: Arc::new(Broker::new(config)),
            hub: NotifyHub::new(),
            arenas: RwLock::new(BTreeMap::new()),
            arena_capacity,
            next_pid: AtomicU32::new(1),
        })
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn notify_stats(&self) -> NotifyStats {
        self.hub.stats()
    }

    /// Starts a new logical process with a fresh pid and arena.
    pub fn spawn(self: &Arc<Self>) -> Participant {
        let pid = Pid(self.next_pid.fetch_add(1, Ordering::Relaxed));
        let arena = Arc::new(Arena::in_process(pid.0 as u64, self.arena_capacity));
        self.arenas.write().insert(arena.id(), arena.clone());
        Participant::new(ParticipantParts {
            pid,
            port: self.broker.clone(),
            arenas: self.clone(),
            arena,
            notifier: self.hub.clone(),
            reclaimer: self.clone(),
        })
    }

    /// Arena statistics summed over every participant ever spawned.
    pub fn arena_stats(&self) -> ArenaStats {
        let arenas = self.arenas.read();
        let mut total = ArenaStats::default();
        for a in arenas.values() {
            let s = a.stats();
            total.capacity += s.capacity;
            total.live_slots += s.live_slots;
            total.live_bytes += s.live_bytes;
            total.free_bytes += s.free_bytes;
            total.quarantined_bytes += s.quarantined_bytes;
            total.reclaimed_while_pinned += s.reclaimed_while_pinned;
            total.poisoned_observations += s.poisoned_observations;
        }
        total
    }

    /// Frees a slot behind the protocol's back (test backdoor used to prove
    /// that the poison detector fires).
    pub fn force_reclaim(&self, r: &ArenaRef) -> Result<(), ArenaError> {
        self.arena(r.arena_id)?.reclaim(r)
    }
}

impl ArenaDirectory for Domain {
    fn arena(&self, arena_id: u64) -> Result<Arc<Arena>, ArenaError> {
        self.arenas.read().get(&arena_id).cloned().ok_or(ArenaError::UnknownRef(ArenaRef {
            arena_id,
            offset: 0,
            length: 0,
        }))
    }
}

impl Reclaimer for Domain {
    fn reclaim(&self, refs: &[ArenaRef]) {
        for r in refs {
            match self.arena(r.arena_id).and_then(|a| a.reclaim(r)) {
                Ok(()) => {}
                Err(e) => log::warn!("reclaim of {r} failed: {e}"),
            }
        }
    }
}
