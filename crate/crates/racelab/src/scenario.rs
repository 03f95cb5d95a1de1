//! Scenario descriptions and the built-in scenario catalogue.
//!
//! A scenario file is JSON:
//!
//! ```json
//! {
//!   "name": "crash-join",
//!   "durability": "transient_local",
//!   "depth": 1,
//!   "cache_refresh": "late",
//!   "messages": [{ "publisher": 0 }, { "publisher": 0 }],
//!   "initial": {
//!     "publishers": [0],
//!     "subscribers": [1],
//!     "published": [0],
//!     "holdings": [{ "message": 0, "process": 1 }]
//!   },
//!   "actors": [
//!     { "process": 0, "ops": [{ "op": "publish", "message": 1 },
//!                             { "op": "reclamation_check", "message": 0 }] },
//!     { "process": null, "ops": [{ "op": "subscriber_crash", "target": 1 }] },
//!     { "process": 2, "ops": [{ "op": "subscriber_join" }] }
//!   ]
//! }
//! ```
//!
//! Processes and messages are small integers. An actor runs its ops in
//! order on behalf of `process`; an actor without a process is a health
//! monitor and may only run crash ops. Every op except the crash ops acts on
//! the actor's own process.

use serde::{Deserialize, Serialize};

use crate::explore::Bound;
use crate::RaceError;

/// Upper limit imposed by the bitmask state encoding.
pub const MAX_PROCESSES: usize = 8;
pub const MAX_MESSAGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Durability {
    Volatile,
    TransientLocal,
}

/// When an owner-driven publisher's cached subscriber list picks up a
/// membership change: inside the membership step itself, or in a separate
/// step at the end of the membership operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheRefresh {
    Early,
    Late,
}

/// The nine metadata-modifying operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    SubscriberJoin,
    SubscriberLeave,
    SubscriberCrash { target: u8 },
    PublisherJoin,
    PublisherLeave,
    PublisherCrash { target: u8 },
    Publish { message: u8 },
    ReclamationCheck { message: u8 },
    Release { message: u8 },
}

impl Op {
    /// Row number in the usual listing of the operations (1 to 9).
    pub fn row(&self) -> u8 {
        match self {
            Op::SubscriberJoin => 1,
            Op::SubscriberLeave => 2,
            Op::SubscriberCrash { .. } => 3,
            Op::PublisherJoin => 4,
            Op::PublisherLeave => 5,
            Op::PublisherCrash { .. } => 6,
            Op::Publish { .. } => 7,
            Op::ReclamationCheck { .. } => 8,
            Op::Release { .. } => 9,
        }
    }

    fn is_crash(&self) -> bool {
        matches!(self, Op::SubscriberCrash { .. } | Op::PublisherCrash { .. })
    }

    fn message(&self) -> Option<u8> {
        match *self {
            Op::Publish { message } | Op::ReclamationCheck { message } | Op::Release { message } => Some(message),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MessageDecl {
    pub publisher: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Holding {
    pub message: u8,
    pub process: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Initial {
    #[serde(default)]
    pub publishers: Vec<u8>,
    #[serde(default)]
    pub subscribers: Vec<u8>,
    /// Messages already published, in publication order.
    #[serde(default)]
    pub published: Vec<u8>,
    #[serde(default)]
    pub holdings: Vec<Holding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActorDecl {
    pub process: Option<u8>,
    pub ops: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub durability: Durability,
    pub depth: u8,
    pub cache_refresh: CacheRefresh,
    pub messages: Vec<MessageDecl>,
    #[serde(default)]
    pub initial: Initial,
    pub actors: Vec<ActorDecl>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, RaceError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Processes mentioned anywhere in the scenario.
    pub fn processes(&self) -> Vec<u8> {
        let mut all: Vec<u8> = self.messages.iter().map(|m| m.publisher).collect();
        all.extend(&self.initial.publishers);
        all.extend(&self.initial.subscribers);
        all.extend(self.initial.holdings.iter().map(|h| h.process));
        for actor in &self.actors {
            all.extend(actor.process);
            for op in &actor.ops {
                if let Op::SubscriberCrash { target } | Op::PublisherCrash { target } = *op {
                    all.push(target);
                }
            }
        }
        all.sort_unstable();
        all.dedup();
        all
    }

    pub fn validate(&self, bound: &Bound) -> Result<(), RaceError> {
        let bad = |msg: String| Err(RaceError::InvalidScenario(msg));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        let processes = self.processes();
        if processes.iter().any(|&p| p as usize >= MAX_PROCESSES) {
            return bad(format!("process ids must be below {MAX_PROCESSES}"));
        }
        if processes.len() > bound.max_processes {
            return bad(format!("{} processes, bound is {}", processes.len(), bound.max_processes));
        }
        if self.messages.len() > bound.max_messages.min(MAX_MESSAGES) {
            return bad(format!("{} messages, bound is {}", self.messages.len(), bound.max_messages));
        }
        if self.actors.len() > u8::MAX as usize || self.actors.iter().any(|a| a.ops.len() > u8::MAX as usize) {
            return bad("too many actors or ops".into());
        }
        let n = self.messages.len() as u8;
        let check_msg = |m: u8| if m < n { Ok(()) } else { bad(format!("message {m} is not declared")) };
        for &m in &self.initial.published {
            check_msg(m)?;
            if !self.initial.publishers.contains(&self.messages[m as usize].publisher) {
                return bad(format!("message {m} published initially by an unregistered publisher"));
            }
        }
        let mut seen = self.initial.published.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return bad("a message is published twice initially".into());
        }
        for h in &self.initial.holdings {
            check_msg(h.message)?;
            if !self.initial.published.contains(&h.message) {
                return bad(format!("holding of unpublished message {}", h.message));
            }
            if !self.initial.subscribers.contains(&h.process) {
                return bad(format!("holding by non-subscriber {}", h.process));
            }
        }
        for (i, actor) in self.actors.iter().enumerate() {
            for op in &actor.ops {
                if let Some(m) = op.message() {
                    check_msg(m)?;
                }
                if actor.process.is_none() && !op.is_crash() {
                    return bad(format!("actor {i} has no process and may only crash others"));
                }
            }
        }
        Ok(())
    }
}

fn actor(process: Option<u8>, ops: Vec<Op>) -> ActorDecl {
    ActorDecl { process, ops }
}

/// A subscriber holding the oldest message crashes while a new subscriber
/// joins with history delivery and the publisher moves the message out of
/// its retention window and checks whether it can be reclaimed.
pub fn crash_join(depth: u8, cache_refresh: CacheRefresh) -> Scenario {
    let mut publisher_ops: Vec<Op> = (1..=depth).map(|m| Op::Publish { message: m }).collect();
    publisher_ops.push(Op::ReclamationCheck { message: 0 });
    Scenario {
        name: format!("crash-join-d{depth}-{}", refresh_name(cache_refresh)),
        durability: Durability::TransientLocal,
        depth,
        cache_refresh,
        messages: vec![MessageDecl { publisher: 0 }; depth as usize + 1],
        initial: Initial {
            publishers: vec![0],
            subscribers: vec![1],
            published: vec![0],
            holdings: vec![Holding { message: 0, process: 1 }],
        },
        actors: vec![
            actor(Some(0), publisher_ops),
            actor(None, vec![Op::SubscriberCrash { target: 1 }]),
            actor(Some(2), vec![Op::SubscriberJoin]),
        ],
    }
}

/// The publisher crashes and its messages are cleaned up while one
/// subscriber releases and another joins with history delivery.
pub fn publisher_crash(cache_refresh: CacheRefresh) -> Scenario {
    Scenario {
        name: format!("publisher-crash-{}", refresh_name(cache_refresh)),
        durability: Durability::TransientLocal,
        depth: 1,
        cache_refresh,
        messages: vec![MessageDecl { publisher: 0 }],
        initial: Initial {
            publishers: vec![0],
            subscribers: vec![1],
            published: vec![0],
            holdings: vec![Holding { message: 0, process: 1 }],
        },
        actors: vec![
            actor(Some(1), vec![Op::Release { message: 0 }]),
            actor(None, vec![Op::PublisherCrash { target: 0 }]),
            actor(Some(2), vec![Op::SubscriberJoin]),
        ],
    }
}

/// Graceful departures on both sides concurrently with a late joiner.
pub fn publisher_leave(cache_refresh: CacheRefresh) -> Scenario {
    Scenario {
        name: format!("publisher-leave-{}", refresh_name(cache_refresh)),
        durability: Durability::TransientLocal,
        depth: 1,
        cache_refresh,
        messages: vec![MessageDecl { publisher: 0 }],
        initial: Initial {
            publishers: vec![0],
            subscribers: vec![1],
            published: vec![0],
            holdings: vec![Holding { message: 0, process: 1 }],
        },
        actors: vec![
            actor(Some(0), vec![Op::PublisherLeave]),
            actor(Some(1), vec![Op::Release { message: 0 }, Op::SubscriberLeave]),
            actor(Some(2), vec![Op::SubscriberJoin]),
        ],
    }
}

/// Publishes that race with a crash and a join, so the publisher may
/// deliver through a cached subscriber list that is out of date.
pub fn stale_cache(cache_refresh: CacheRefresh) -> Scenario {
    Scenario {
        name: format!("stale-cache-{}", refresh_name(cache_refresh)),
        durability: Durability::TransientLocal,
        depth: 1,
        cache_refresh,
        messages: vec![MessageDecl { publisher: 0 }, MessageDecl { publisher: 0 }],
        initial: Initial {
            publishers: vec![0],
            subscribers: vec![1],
            ..Initial::default()
        },
        actors: vec![
            actor(
                Some(0),
                vec![
                    Op::Publish { message: 0 },
                    Op::Publish { message: 1 },
                    Op::ReclamationCheck { message: 0 },
                ],
            ),
            actor(None, vec![Op::SubscriberCrash { target: 1 }]),
            actor(Some(2), vec![Op::SubscriberJoin, Op::Release { message: 0 }]),
        ],
    }
}

/// A second publisher joins a volatile topic while subscribers churn.
pub fn second_publisher(cache_refresh: CacheRefresh) -> Scenario {
    Scenario {
        name: format!("second-publisher-{}", refresh_name(cache_refresh)),
        durability: Durability::Volatile,
        depth: 1,
        cache_refresh,
        messages: vec![MessageDecl { publisher: 0 }, MessageDecl { publisher: 3 }],
        initial: Initial {
            publishers: vec![0],
            subscribers: vec![1],
            published: vec![0],
            holdings: vec![Holding { message: 0, process: 1 }],
        },
        actors: vec![
            actor(
                Some(3),
                vec![Op::PublisherJoin, Op::Publish { message: 1 }, Op::ReclamationCheck { message: 1 }],
            ),
            actor(Some(1), vec![Op::Release { message: 0 }, Op::SubscriberLeave]),
            actor(Some(2), vec![Op::SubscriberJoin, Op::Release { message: 1 }]),
        ],
    }
}

fn refresh_name(r: CacheRefresh) -> &'static str {
    match r {
        CacheRefresh::Early => "early",
        CacheRefresh::Late => "late",
    }
}

/// Every built-in scenario. Together they exercise all nine operations.
pub fn catalogue() -> Vec<Scenario> {
    let mut all = Vec::new();
    for refresh in [CacheRefresh::Late, CacheRefresh::Early] {
        all.push(crash_join(1, refresh));
        all.push(crash_join(2, refresh));
        all.push(publisher_crash(refresh));
        all.push(publisher_leave(refresh));
        all.push(stale_cache(refresh));
        all.push(second_publisher(refresh));
    }
    all
}

/// Looks up a built-in scenario. The short names `crash-join` and
/// `publisher-crash` select depth 1 with late cache refresh.
pub fn named(name: &str) -> Result<Scenario, RaceError> {
    let alias = match name {
        "crash-join" => "crash-join-d1-late",
        "publisher-crash" => "publisher-crash-late",
        "publisher-leave" => "publisher-leave-late",
        "stale-cache" => "stale-cache-late",
        "second-publisher" => "second-publisher-late",
        other => other,
    };
    catalogue()
        .into_iter()
        .find(|s| s.name == alias)
        .ok_or_else(|| RaceError::UnknownScenario(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalogue_is_valid_and_uniquely_named() {
        let all = catalogue();
        for s in &all {
            s.validate(&Bound::default()).unwrap();
        }
        let mut names: Vec<&str> = all.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), all.len());
    }

    #[test]
    fn catalogue_covers_every_operation() {
        let mut rows: Vec<u8> = catalogue()
            .iter()
            .flat_map(|s| s.actors.iter().flat_map(|a| a.ops.iter().map(Op::row)))
            .collect();
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows, (1..=9).collect::<Vec<_>>());
    }

    #[test]
    fn json_round_trip() {
        let s = crash_join(2, CacheRefresh::Early);
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn documented_example_parses() {
        let text = r#"{
          "name": "crash-join", "durability": "transient_local", "depth": 1, "cache_refresh": "late",
          "messages": [{ "publisher": 0 }, { "publisher": 0 }],
          "initial": { "publishers": [0], "subscribers": [1], "published": [0],
                       "holdings": [{ "message": 0, "process": 1 }] },
          "actors": [
            { "process": 0, "ops": [{ "op": "publish", "message": 1 }, { "op": "reclamation_check", "message": 0 }] },
            { "process": null, "ops": [{ "op": "subscriber_crash", "target": 1 }] },
            { "process": 2, "ops": [{ "op": "subscriber_join" }] }
          ]
        }"#;
        let parsed = Scenario::from_json(text).unwrap();
        let mut expected = crash_join(1, CacheRefresh::Late);
        expected.name = "crash-join".into();
        assert_eq!(parsed, expected);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let bound = Bound::default();
        let mut s = crash_join(1, CacheRefresh::Late);
        s.actors[1].ops = vec![Op::Publish { message: 1 }];
        assert!(matches!(s.validate(&bound), Err(RaceError::InvalidScenario(_))));

        let mut s = crash_join(1, CacheRefresh::Late);
        s.actors[0].ops.push(Op::Release { message: 7 });
        assert!(s.validate(&bound).is_err());

        let mut s = crash_join(1, CacheRefresh::Late);
        s.actors.push(actor(Some(4), vec![Op::SubscriberJoin]));
        s.actors.push(actor(Some(5), vec![Op::SubscriberJoin]));
        assert!(s.validate(&bound).is_err());

        assert!(matches!(named("nope"), Err(RaceError::UnknownScenario(_))));
    }
}
