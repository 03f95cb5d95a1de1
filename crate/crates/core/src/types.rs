//! Identifiers and QoS shared by every layer.

use std::fmt;

/// Identity of a participating process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pid(pub u32);

/// Topic-local publisher id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublisherId(pub u32);

/// Topic-local subscriber id; also the subscriber's bit index in every
/// entry bitmap of the topic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriberId(pub u32);

/// Per-topic monotonically increasing message id. Zero means "none".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct EntryId(pub u64);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pid:{}", self.0)
    }
}

impl fmt::Display for PublisherId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pub:{}", self.0)
    }
}

impl fmt::Display for SubscriberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sub:{}", self.0)
    }
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Durability {
    Volatile,
    TransientLocal,
}

impl Durability {
    pub fn as_u8(self) -> u8 {
        match self {
            Durability::Volatile => 0,
            Durability::TransientLocal => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Durability::Volatile),
            1 => Some(Durability::TransientLocal),
            _ => None,
        }
    }
}

/// Durability plus Keep-Last depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Qos {
    pub durability: Durability,
    pub depth: u32,
}

impl Qos {
    pub fn volatile(depth: u32) -> Self {
        Self {
            durability: Durability::Volatile,
            depth,
        }
    }

    pub fn transient_local(depth: u32) -> Self {
        Self {
            durability: Durability::TransientLocal,
            depth,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.depth >= 1
    }
}
