//! Zero-copy publish/subscribe with cross-process message lifetimes.
//!
//! Payloads live in per-publisher arenas. A single broker owns all
//! lifetime metadata: for each published entry it keeps a bitmap of the
//! subscribers that still reference it, and an entry is evicted only when
//! that bitmap is empty and the publisher has published at least `depth`
//! newer entries. Application code works with [`MessageHandle`]s, which
//! count copies locally and talk to the broker only on the first reference
//! and the last release.
//!
//! * [`broker`]: entry trees, endpoint tables, lock hierarchy.
//! * [`handle`]: the counted handle and its control block.
//! * [`arena`]: payload slots, in-process (poisoning) and shared memory.
//! * [`notify`]: capacity-1 wakeup queues and polling.
//! * [`client`] / [`domain`]: participants and endpoints.
//! * [`proto`]: the socket protocol for running the broker as a process.

pub mod arena;
pub mod broker;
pub mod client;
pub mod clock;
pub mod domain;
pub mod handle;
pub mod notify;
pub mod proto;
pub mod types;

pub use arena::{Arena, ArenaError, ArenaRef};
pub use broker::{Broker, BrokerConfig, BrokerError};
pub use client::{ClientError, Participant, Publisher, Subscriber};
pub use domain::Domain;
pub use handle::{HandleError, MessageHandle, PublishReceipt, Role};
pub use types::{Durability, EntryId, Pid, PublisherId, Qos, SubscriberId};
