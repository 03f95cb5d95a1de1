//! Request/response protocol between client processes and a broker process.
//!
//! Every frame is
//!
//! ```text
//! u32 length      bytes that follow this field
//! u64 request_id
//! u8  opcode
//! ... body
//! ```
//!
//! All integers are little-endian and fixed width. Strings are a `u16`
//! byte count followed by UTF-8 (topic names at most 255 bytes). Endpoint,
//! entry and process ids travel as `u64`; QoS as `{u8 durability, u32
//! depth}`; an arena ref as `{u64 arena_id, u64 offset, u64 length}`; lists
//! as a `u32` count followed by the items.
//!
//! A response carries the request's id and opcode, then a status byte: `0`
//! followed by the opcode's result body, or `1` followed by an encoded
//! [`BrokerError`]. A request with an unknown opcode or a malformed body
//! gets an error response; the connection stays open.
//!
//! The connection doubles as the liveness signal of the client process:
//! when it closes, the broker runs process-exit cleanup for that client.

mod client;
mod codec;
mod remote;
mod server;

pub use client::{ProtoClient, RemoteReclaimer};
pub use codec::{
    decode_request, decode_response, encode_request, encode_response, encode_snapshot, read_frame, write_frame,
};
pub use remote::{connect_participant, RemoteParticipant, RemoteSetup};
pub use server::{BrokerServer, ServerHandle};

use thiserror::Error;

use crate::arena::ArenaRef;
use crate::broker::{BrokerError, Delivery, PublishOutcome, Snapshot, SubscriberRegistration};
use crate::types::{EntryId, Pid, PublisherId, Qos, SubscriberId};

pub const PROTOCOL_VERSION: u8 = 1;
pub const SOCKET_ENV: &str = "PUBSUB_BROKER_SOCK";
pub const DEFAULT_SOCKET_PATH: &str = "/tmp/pubsub-lifetimes.sock";
/// Upper bound on a frame's length field.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

/// Socket path from the environment, or the default.
pub fn socket_path() -> std::path::PathBuf {
    std::env::var_os(SOCKET_ENV)
        .map(Into::into)
        .unwrap_or_else(|| DEFAULT_SOCKET_PATH.into())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtoError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("connection error: {0}")]
    Io(String),
    #[error("broker speaks protocol version {0}, expected {PROTOCOL_VERSION}")]
    VersionMismatch(u8),
}

impl From<std::io::Error> for ProtoError {
    fn from(e: std::io::Error) -> Self {
        ProtoError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Hello = 0,
    RegisterPub = 1,
    RegisterSub = 2,
    UnregisterPub = 3,
    UnregisterSub = 4,
    Publish = 5,
    Receive = 6,
    Release = 7,
    Snapshot = 8,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Self> {
        use Opcode::*;
        Some(match v {
            0 => Hello,
            1 => RegisterPub,
            2 => RegisterSub,
            3 => UnregisterPub,
            4 => UnregisterSub,
            5 => Publish,
            6 => Receive,
            7 => Release,
            8 => Snapshot,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Hello { version: u8, pid: Pid },
    RegisterPub { topic: String, qos: Qos, pid: Pid },
    RegisterSub { topic: String, qos: Qos, pid: Pid },
    UnregisterPub { topic: String, id: PublisherId },
    UnregisterSub { topic: String, id: SubscriberId },
    Publish { topic: String, publisher: PublisherId, payload: ArenaRef },
    Receive { topic: String, subscriber: SubscriberId },
    Release { topic: String, subscriber: SubscriberId, entry: EntryId },
    Snapshot { topic: Option<String> },
}

impl Request {
    pub fn opcode(&self) -> Opcode {
        match self {
            Request::Hello { .. } => Opcode::Hello,
            Request::RegisterPub { .. } => Opcode::RegisterPub,
            Request::RegisterSub { .. } => Opcode::RegisterSub,
            Request::UnregisterPub { .. } => Opcode::UnregisterPub,
            Request::UnregisterSub { .. } => Opcode::UnregisterSub,
            Request::Publish { .. } => Opcode::Publish,
            Request::Receive { .. } => Opcode::Receive,
            Request::Release { .. } => Opcode::Release,
            Request::Snapshot { .. } => Opcode::Snapshot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFrame {
    pub request_id: u64,
    pub request: Request,
}

/// Successful result bodies. The frame's opcode selects the layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Hello { version: u8 },
    Publisher(PublisherId),
    Subscriber(SubscriberRegistration),
    Evicted(Vec<ArenaRef>),
    /// `deferred` lists payloads of the publisher's arena that were evicted
    /// by other clients' membership changes since its last publish.
    Published { outcome: PublishOutcome, deferred: Vec<ArenaRef> },
    Deliveries(Vec<Delivery>),
    Released,
    Snapshot(Snapshot),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseFrame {
    pub request_id: u64,
    /// Echo of the request opcode byte, known or not.
    pub opcode: u8,
    pub result: Result<Reply, BrokerError>,
}
