//! Explicit-state exploration of message reclamation under two metadata
//! architectures.
//!
//! Both architectures share one abstract state: a data plane (per-message
//! reference sets, retention counters, reclaimed flags), a control plane
//! (subscriber and publisher membership, watermarks) and an oracle map of
//! which processes really hold each message. The oracle is never consulted by
//! the modeled protocols; it only decides whether a state violates
//!
//! * **R1**, no premature reclamation: a reclaimed message has no live holder;
//! * **R2**, no permanent leak: once every actor is done, each message that
//!   is neither retained nor held has been (or can still be) reclaimed.
//!
//! Under [`Architecture::SingleWriter`] every operation is one atomic step
//! that sees and updates both planes together, followed by a reclamation
//! sweep. Under [`Architecture::OwnerDriven`] an operation is split into one
//! step per plane access, publishers deliver to a locally cached subscriber
//! list, and reclamation is decided by the owning publisher from a membership
//! snapshot and a later data-plane read. No mitigation handshakes are modeled.

pub mod explore;
pub mod model;
pub mod scenario;

pub use explore::{explore, replay, Bound, Exploration, Trace, Violation, ViolationKind};
pub use model::{AbstractState, Architecture, Micro, Model, OpStep, Plane};
pub use scenario::{CacheRefresh, Durability, Op, Scenario};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RaceError {
    #[error("state count exceeded the bound of {limit}")]
    BoundExceeded { limit: usize },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
