//! Per-process client runtime: participants and their endpoints.
//!
//! A [`Participant`] stands for one process. It bundles the broker port
//! (in-process [`Broker`](crate::broker::Broker) or a socket client), the
//! arena the process publishes from, the arena directory used to resolve
//! received payloads, the wakeup backend and the sink for evicted payloads.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::arena::{Arena, ArenaDirectory, ArenaError, ArenaRef};
use crate::broker::{BrokerError, MetadataPort};
use crate::handle::{HandleError, MessageHandle};
use crate::notify::{NotifyError, Notifier, SubscriberWakeup};
use crate::types::{EntryId, Pid, PublisherId, Qos, SubscriberId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClientError {
    #[error("participant has exited")]
    ProcessGone,
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Notify(#[from] NotifyError),
    #[error(transparent)]
    Handle(#[from] HandleError),
}

/// Destination for payloads the broker evicted.
pub trait Reclaimer: Send + Sync {
    fn reclaim(&self, refs: &[ArenaRef]);
}

/// Reclaims refs that belong to one arena and ignores the rest (their owner
/// reclaims them).
pub struct OwnArenaReclaimer(pub Arc<Arena>);

impl Reclaimer for OwnArenaReclaimer {
    fn reclaim(&self, refs: &[ArenaRef]) {
        for r in refs.iter().filter(|r| r.arena_id == self.0.id()) {
            if let Err(e) = self.0.reclaim(r) {
                log::warn!("reclaim of {r} failed: {e}");
            }
        }
    }
}

/// Everything a participant is made of.
pub struct ParticipantParts {
    pub pid: Pid,
    pub port: Arc<dyn MetadataPort>,
    pub arenas: Arc<dyn ArenaDirectory>,
    pub arena: Arc<Arena>,
    pub notifier: Arc<dyn Notifier>,
    pub reclaimer: Arc<dyn Reclaimer>,
}

pub struct Context {
    pid: Pid,
    alive: AtomicBool,
    port: Arc<dyn MetadataPort>,
    arenas: Arc<dyn ArenaDirectory>,
    arena: Arc<Arena>,
    notifier: Arc<dyn Notifier>,
    reclaimer: Arc<dyn Reclaimer>,
}

impl Context {
    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    pub fn port(&self) -> &dyn MetadataPort {
        &*self.port
    }

    pub fn notifier(&self) -> &dyn Notifier {
        &*self.notifier
    }

    /// Passes evicted payloads on. Called after every publish, even with
    /// nothing evicted, so remote reclaimers can fold in deferred work.
    pub fn reclaim(&self, refs: &[ArenaRef]) {
        self.reclaimer.reclaim(refs);
    }

    fn check_alive(&self) -> Result<(), ClientError> {
        if self.is_alive() {
            Ok(())
        } else {
            Err(ClientError::ProcessGone)
        }
    }
}

impl std::fmt::Debug for Context {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Context")
            .field("pid", &self.pid)
            .field("alive", &self.is_alive())
            .field("arena", &self.arena.id())
            .finish()
    }
}

/// One logical process.
#[derive(Debug)]
pub struct Participant {
    ctx: Arc<Context>,
}

impl Participant {
    pub fn new(parts: ParticipantParts) -> Self {
        Self {
            ctx: Arc::new(Context {
                pid: parts.pid,
                alive: AtomicBool::new(true),
                port: parts.port,
                arenas: parts.arenas,
                arena: parts.arena,
                notifier: parts.notifier,
                reclaimer: parts.reclaimer,
            }),
        }
    }

    pub fn pid(&self) -> Pid {
        self.ctx.pid
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.ctx.arena
    }

    pub fn is_alive(&self) -> bool {
        self.ctx.is_alive()
    }

    pub fn create_publisher(&self, topic: &str, qos: Qos) -> Result<Publisher, ClientError> {
        self.ctx.check_alive()?;
        let id = self.ctx.port.register_publisher(topic, qos, self.ctx.pid)?;
        Ok(Publisher {
            ctx: self.ctx.clone(),
            topic: topic.into(),
            id,
            qos,
        })
    }

    pub fn create_subscriber(&self, topic: &str, qos: Qos) -> Result<Subscriber, ClientError> {
        self.ctx.check_alive()?;
        let reg = self.ctx.port.register_subscriber(topic, qos, self.ctx.pid)?;
        let wakeup = match self.ctx.notifier.attach(topic, reg.id) {
            Ok(w) => w,
            Err(e) => {
                let evicted = self.ctx.port.unregister_subscriber(topic, reg.id)?;
                self.ctx.reclaim(&evicted);
                return Err(e.into());
            }
        };
        Ok(Subscriber {
            ctx: self.ctx.clone(),
            topic: topic.into(),
            id: reg.id,
            qos,
            initial_watermark: reg.initial_watermark,
            wakeup,
        })
    }

    /// Abrupt termination: the broker cleans up every endpoint of this
    /// process at once. Endpoints and handles that are still around become
    /// inert; dropping them sends nothing.
    pub fn crash(&self) {
        self.crash_discarding(());
    }

    /// Crash in which `state` (handles, endpoints) dies with the process:
    /// it is dropped after the process stops talking to the broker and
    /// before the broker's exit cleanup runs.
    pub fn crash_discarding<T>(&self, state: T) {
        if !self.ctx.alive.swap(false, Ordering::AcqRel) {
            return;
        }
        drop(state);
        match self.ctx.port.process_exit(self.ctx.pid) {
            Ok(evicted) => self.ctx.reclaim(&evicted),
            Err(e) => log::warn!("exit of {} not processed: {e}", self.ctx.pid),
        }
    }
}

/// A registered publisher endpoint. Dropping it unregisters.
#[derive(Debug)]
pub struct Publisher {
    ctx: Arc<Context>,
    topic: Arc<str>,
    id: PublisherId,
    qos: Qos,
}

impl Publisher {
    pub fn id(&self) -> PublisherId {
        self.id
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn qos(&self) -> Qos {
        self.qos
    }

    /// Reserves a writable payload slot of `length` bytes.
    pub fn loan(&self, length: u64) -> Result<MessageHandle, ClientError> {
        self.ctx.check_alive()?;
        let r = self.ctx.arena.allocate(length)?;
        Ok(MessageHandle::loan(
            self.ctx.clone(),
            self.topic.clone(),
            self.id,
            self.ctx.arena.clone(),
            r,
        ))
    }

    /// Loans a slot and fills it with `bytes`.
    pub fn loan_with(&self, bytes: &[u8]) -> Result<MessageHandle, ClientError> {
        let mut h = self.loan(bytes.len() as u64)?;
        h.payload_mut()?.copy_from_slice(bytes);
        Ok(h)
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        if !self.ctx.is_alive() {
            return;
        }
        match self.ctx.port.unregister_publisher(&self.topic, self.id) {
            Ok(evicted) => self.ctx.reclaim(&evicted),
            Err(e) => log::warn!("unregistering {} on {:?} failed: {e}", self.id, self.topic),
        }
    }
}

/// A registered subscriber endpoint with its wakeup queue. Dropping it
/// unregisters.
#[derive(Debug)]
pub struct Subscriber {
    ctx: Arc<Context>,
    topic: Arc<str>,
    id: SubscriberId,
    qos: Qos,
    initial_watermark: EntryId,
    wakeup: SubscriberWakeup,
}

impl Subscriber {
    pub fn id(&self) -> SubscriberId {
        self.id
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn qos(&self) -> Qos {
        self.qos
    }

    pub fn initial_watermark(&self) -> EntryId {
        self.initial_watermark
    }

    /// Blocks until woken by a publish or until `timeout` passes.
    pub fn wait(&self, timeout: Duration) -> Result<(), NotifyError> {
        self.wakeup.wait(timeout)
    }

    /// Takes a reference to every entry published since the last receive.
    pub fn receive(&self) -> Result<Vec<MessageHandle>, ClientError> {
        self.ctx.check_alive()?;
        let deliveries = self.ctx.port.receive_entries(&self.topic, self.id)?;
        let mut out = Vec::with_capacity(deliveries.len());
        let mut failure = None;
        for d in deliveries {
            if failure.is_some() {
                self.release_quietly(d.entry_id);
                continue;
            }
            match self.ctx.arenas.arena(d.payload.arena_id) {
                Ok(arena) => out.push(MessageHandle::received(
                    self.ctx.clone(),
                    self.topic.clone(),
                    self.id,
                    d.entry_id,
                    arena,
                    d.payload,
                )),
                Err(e) => {
                    self.release_quietly(d.entry_id);
                    failure = Some(e);
                }
            }
        }
        match failure {
            Some(e) => Err(e.into()),
            None => Ok(out),
        }
    }

    fn release_quietly(&self, entry: EntryId) {
        if let Err(e) = self.ctx.port.release_reference(&self.topic, self.id, entry) {
            log::warn!("release of {entry} failed: {e}");
        }
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        self.ctx.notifier.detach(&self.topic, self.id);
        if !self.ctx.is_alive() {
            return;
        }
        match self.ctx.port.unregister_subscriber(&self.topic, self.id) {
            Ok(evicted) => self.ctx.reclaim(&evicted),
            Err(e) => log::warn!("unregistering {} on {:?} failed: {e}", self.id, self.topic),
        }
    }
}
