//! Application-facing message handles with two-level reference counting.
//!
//! Copies of a [`MessageHandle`] inside one process share a [`ControlBlock`]
//! and only touch its local count. The broker is contacted on the local
//! count's 0 -> 1 transition (the receive that created the block) and its
//! 1 -> 0 transition (one release on the final drop), so the number of
//! global updates per message does not depend on how often the application
//! copies the handle.
//!
//! A publisher loan becomes invalid for every copy the moment it is
//! published: the invalid flag and the local count live in one atomic word,
//! so a clone racing with publish either happens before the flip or fails.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::arena::{Arena, ArenaError, ArenaRef, PayloadView, PayloadViewMut};
use crate::broker::BrokerError;
use crate::client::Context;
use crate::types::{EntryId, PublisherId, SubscriberId};

const INVALID: u64 = 1 << 63;
const COUNT_MASK: u64 = INVALID - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandleError {
    #[error("handle was invalidated by publish")]
    InvalidHandle,
    #[error("subscriber handles are read-only")]
    ReadOnly,
    #[error("payload is shared by {0} handles; writes need a unique handle")]
    Shared(u64),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

impl HandleError {
    /// True when the access hit a reclaimed slot (an R1 violation).
    pub fn is_poisoned(&self) -> bool {
        matches!(self, HandleError::Arena(ArenaError::PoisonedPayload(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    PublisherLoan,
    SubscriberRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishReceipt {
    pub entry_id: EntryId,
    pub notified_subscriber_count: usize,
    pub evicted_count: usize,
}

#[derive(Debug)]
enum Origin {
    Loan { publisher: PublisherId, entry: AtomicU64 },
    Received { subscriber: SubscriberId, entry: EntryId },
}

/// State shared by all in-process copies of one handle.
pub struct ControlBlock {
    /// Bit 63: invalidated by publish. Low bits: local count.
    state: AtomicU64,
    ctx: Arc<Context>,
    topic: Arc<str>,
    arena: Arc<Arena>,
    payload: ArenaRef,
    origin: Origin,
}

impl ControlBlock {
    pub fn local_count(&self) -> u64 {
        self.state.load(Ordering::Acquire) & COUNT_MASK
    }

    pub fn is_valid(&self) -> bool {
        self.state.load(Ordering::Acquire) & INVALID == 0
    }

    pub fn is_published(&self) -> bool {
        match &self.origin {
            Origin::Loan { entry, .. } => entry.load(Ordering::Acquire) != 0,
            Origin::Received { .. } => true,
        }
    }

    fn last_drop(&self) {
        match &self.origin {
            Origin::Received { subscriber, entry } => {
                if self.ctx.is_alive() {
                    if let Err(e) = self.ctx.port().release_reference(&self.topic, *subscriber, *entry) {
                        log::debug!("release of {entry} on {:?} failed: {e}", self.topic);
                    }
                }
                self.arena.unpin(&self.payload);
            }
            Origin::Loan { entry, .. } => {
                if entry.load(Ordering::Acquire) == 0 {
                    self.arena.unpin(&self.payload);
                    if let Err(e) = self.arena.reclaim(&self.payload) {
                        log::warn!("freeing unpublished loan {} failed: {e}", self.payload);
                    }
                }
            }
        }
    }
}

impl fmt::Debug for ControlBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlBlock")
            .field("local_count", &self.local_count())
            .field("valid", &self.is_valid())
            .field("topic", &self.topic)
            .field("payload", &self.payload)
            .field("origin", &self.origin)
            .finish()
    }
}

/// A counted reference to a message payload.
///
/// There is no `Clone` impl because copying an invalidated loan fails; use
/// [`MessageHandle::try_clone`].
#[derive(Debug)]
pub struct MessageHandle {
    block: Arc<ControlBlock>,
}

impl MessageHandle {
    pub(crate) fn loan(
        ctx: Arc<Context>,
        topic: Arc<str>,
        publisher: PublisherId,
        arena: Arc<Arena>,
        payload: ArenaRef,
    ) -> Self {
        arena.pin(&payload);
        Self::with_block(ControlBlock {
            state: AtomicU64::new(1),
            ctx,
            topic,
            arena,
            payload,
            origin: Origin::Loan {
                publisher,
                entry: AtomicU64::new(0),
            },
        })
    }

    pub(crate) fn received(
        ctx: Arc<Context>,
        topic: Arc<str>,
        subscriber: SubscriberId,
        entry: EntryId,
        arena: Arc<Arena>,
        payload: ArenaRef,
    ) -> Self {
        arena.pin(&payload);
        Self::with_block(ControlBlock {
            state: AtomicU64::new(1),
            ctx,
            topic,
            arena,
            payload,
            origin: Origin::Received { subscriber, entry },
        })
    }

    fn with_block(block: ControlBlock) -> Self {
        Self { block: Arc::new(block) }
    }

    pub fn role(&self) -> Role {
        match self.block.origin {
            Origin::Loan { .. } => Role::PublisherLoan,
            Origin::Received { .. } => Role::SubscriberRef,
        }
    }

    pub fn topic(&self) -> &str {
        &self.block.topic
    }

    /// Entry id; `None` for a loan that has not been published.
    pub fn entry_id(&self) -> Option<EntryId> {
        match &self.block.origin {
            Origin::Loan { entry, .. } => match entry.load(Ordering::Acquire) {
                0 => None,
                id => Some(EntryId(id)),
            },
            Origin::Received { entry, .. } => Some(*entry),
        }
    }

    pub fn payload_ref(&self) -> ArenaRef {
        self.block.payload
    }

    pub fn local_count(&self) -> u64 {
        self.block.local_count()
    }

    pub fn is_valid(&self) -> bool {
        self.block.is_valid()
    }

    pub fn control(&self) -> &ControlBlock {
        &self.block
    }

    /// In-process copy: bumps the local count only.
    pub fn try_clone(&self) -> Result<Self, HandleError> {
        let mut cur = self.block.state.load(Ordering::Acquire);
        loop {
            if cur & INVALID != 0 {
                return Err(HandleError::InvalidHandle);
            }
            match self
                .block
                .state
                .compare_exchange_weak(cur, cur + 1, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => {
                    return Ok(Self {
                        block: self.block.clone(),
                    })
                }
                Err(actual) => cur = actual,
            }
        }
    }

    /// Read-only view of the payload.
    pub fn payload(&self) -> Result<PayloadView<'_>, HandleError> {
        if !self.is_valid() {
            return Err(HandleError::InvalidHandle);
        }
        Ok(self.block.arena.resolve(&self.block.payload)?)
    }

    /// Writable view; only for an unpublished loan held by a single handle.
    pub fn payload_mut(&mut self) -> Result<PayloadViewMut<'_>, HandleError> {
        if self.role() == Role::SubscriberRef {
            return Err(HandleError::ReadOnly);
        }
        let state = self.block.state.load(Ordering::Acquire);
        if state & INVALID != 0 {
            return Err(HandleError::InvalidHandle);
        }
        if state & COUNT_MASK > 1 {
            return Err(HandleError::Shared(state & COUNT_MASK));
        }
        Ok(self.block.arena.resolve_mut(&self.block.payload)?)
    }

    /// Hands the loan to the broker, invalidates every copy and wakes the
    /// topic's current subscribers.
    pub fn publish(&self) -> Result<PublishReceipt, HandleError> {
        let Origin::Loan { publisher, entry } = &self.block.origin else {
            return Err(HandleError::InvalidHandle);
        };
        let prev = self.block.state.fetch_or(INVALID, Ordering::AcqRel);
        if prev & INVALID != 0 {
            return Err(HandleError::InvalidHandle);
        }
        let ctx = &self.block.ctx;
        let outcome = match ctx.port().publish_entry(&self.block.topic, *publisher, self.block.payload) {
            Ok(o) => o,
            Err(e) => {
                self.block.state.fetch_and(!INVALID, Ordering::AcqRel);
                return Err(e.into());
            }
        };
        entry.store(outcome.entry_id.0, Ordering::Release);
        // The broker owns the payload from here on.
        self.block.arena.unpin(&self.block.payload);
        ctx.reclaim(&outcome.evicted);
        let notified = outcome
            .subscribers
            .iter()
            .filter(|s| ctx.notifier().notify(&self.block.topic, **s).is_ok())
            .count();
        Ok(PublishReceipt {
            entry_id: outcome.entry_id,
            notified_subscriber_count: notified,
            evicted_count: outcome.evicted.len(),
        })
    }
}

impl Drop for MessageHandle {
    fn drop(&mut self) {
        let prev = self.block.state.fetch_sub(1, Ordering::AcqRel);
        if prev & COUNT_MASK == 1 {
            self.block.last_drop();
        }
    }
}
