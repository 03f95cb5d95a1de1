//! Abstract state, micro-steps and their semantics.

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::explore::Bound;
use crate::scenario::{CacheRefresh, Durability, Op, Scenario, MAX_PROCESSES};
use crate::RaceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    SingleWriter,
    OwnerDriven,
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single-writer" => Ok(Architecture::SingleWriter),
            "owner-driven" => Ok(Architecture::OwnerDriven),
            other => Err(format!("unknown architecture {other:?}, expected single-writer or owner-driven")),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::SingleWriter => "single-writer",
            Architecture::OwnerDriven => "owner-driven",
        })
    }
}

/// One atomic piece of an operation. Single-writer operations consist of a
/// single [`Micro::Fused`] step; owner-driven operations are split so that
/// each step touches one plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Micro {
    Fused,
    /// Subscriber added to the membership set.
    JoinRegister,
    /// Joiner reads which messages are still retained for history delivery.
    JoinReadHistory,
    /// Joiner takes references on the messages it read.
    JoinAcquire,
    /// Registered publishers copy the membership set into their caches.
    RefreshCache,
    /// Leaving subscriber drops its references.
    LeaveRelease,
    /// Subscriber removed from the membership set.
    Deregister,
    /// The process dies; its real holdings vanish.
    CrashEvent,
    /// Crashed subscriber's bits removed from the reference sets.
    ClearRefs,
    PublisherRegister,
    /// Publisher removed from the membership set; the membership set is
    /// read for the following free step.
    PublisherDeregister,
    /// Messages of the departed publisher lose retention and are freed when
    /// no member of the earlier snapshot references them.
    PublisherFree,
    Publish,
    CheckReadMembers,
    CheckReadData,
    CheckDecide,
    Release,
}

/// Which metadata planes a step or operation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    None,
    Data,
    Control,
    Both,
}

impl Plane {
    fn union(self, other: Plane) -> Plane {
        use Plane::*;
        match (self, other) {
            (None, p) | (p, None) => p,
            (a, b) if a == b => a,
            _ => Both,
        }
    }

    pub fn of_op(op: &Op) -> Plane {
        match op {
            Op::PublisherJoin => Plane::Control,
            Op::Publish { .. } | Op::Release { .. } => Plane::Data,
            _ => Plane::Both,
        }
    }

    pub fn of_steps(steps: &[OpStep]) -> Plane {
        steps.iter().fold(Plane::None, |acc, s| acc.union(s.plane()))
    }
}

bitflags! {
    /// State components, used to decide whether two steps commute.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct Resource: u16 {
        const MEMBERS = 1;
        const PUBLISHERS = 1 << 1;
        const CACHE = 1 << 2;
        const WATERMARKS = 1 << 3;
        const REFS = 1 << 4;
        const RETENTION = 1 << 5;
        const RECLAIMED = 1 << 6;
        const LIVE = 1 << 7;
        const CRASHED = 1 << 8;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OpStep {
    pub actor: u8,
    /// Index of the op within the actor's program.
    pub op_index: u8,
    pub op: Op,
    pub micro: Micro,
}

impl OpStep {
    pub fn plane(&self) -> Plane {
        use Micro::*;
        match self.micro {
            Fused => Plane::of_op(&self.op),
            JoinReadHistory | JoinAcquire | LeaveRelease | ClearRefs | PublisherFree | Publish | CheckReadData
            | CheckDecide | Release => Plane::Data,
            JoinRegister | RefreshCache | Deregister | PublisherRegister | PublisherDeregister | CheckReadMembers => {
                Plane::Control
            }
            CrashEvent => Plane::None,
        }
    }

    /// Resources read and written, including the reads of the op's
    /// precondition. Every step reads the crash set since a crash disables
    /// the crashed process's actors.
    pub fn footprint(&self) -> (Resource, Resource) {
        use Micro::*;
        use Resource as R;
        let (reads, writes) = match self.micro {
            Fused => (R::all(), R::all()),
            JoinRegister => (R::MEMBERS | R::PUBLISHERS, R::MEMBERS | R::CACHE),
            JoinReadHistory => (R::RETENTION | R::RECLAIMED, R::empty()),
            JoinAcquire => (R::REFS | R::LIVE, R::REFS | R::LIVE | R::WATERMARKS),
            RefreshCache => (R::MEMBERS | R::PUBLISHERS, R::CACHE),
            LeaveRelease => (R::MEMBERS | R::REFS | R::LIVE, R::REFS | R::LIVE),
            Deregister => (R::MEMBERS | R::PUBLISHERS | R::LIVE, R::MEMBERS | R::LIVE | R::CACHE),
            CrashEvent => (R::LIVE, R::CRASHED | R::LIVE),
            ClearRefs => (R::REFS, R::REFS),
            PublisherRegister => (R::MEMBERS | R::PUBLISHERS, R::PUBLISHERS | R::CACHE),
            PublisherDeregister => (R::MEMBERS | R::PUBLISHERS, R::PUBLISHERS),
            PublisherFree => (R::REFS | R::RETENTION | R::RECLAIMED, R::RETENTION | R::RECLAIMED),
            Publish => (
                R::CACHE | R::MEMBERS | R::PUBLISHERS | R::RETENTION,
                R::REFS | R::RETENTION | R::LIVE | R::WATERMARKS,
            ),
            CheckReadMembers => (R::MEMBERS | R::RETENTION | R::RECLAIMED, R::empty()),
            CheckReadData => (R::REFS | R::RETENTION | R::RECLAIMED, R::empty()),
            CheckDecide => (R::RECLAIMED, R::RECLAIMED),
            Release => (R::REFS | R::LIVE, R::REFS | R::LIVE),
        };
        (reads | R::CRASHED, writes)
    }

    /// Steps of different actors whose footprints do not conflict.
    pub fn independent(&self, other: &OpStep) -> bool {
        if self.actor == other.actor {
            return false;
        }
        let (ra, wa) = self.footprint();
        let (rb, wb) = other.footprint();
        !(wa.intersects(rb | wb) || wb.intersects(ra))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MessageState {
    pub publisher: u8,
    pub published: bool,
    /// Number of further publishes by the same publisher before the message
    /// leaves the retention window; 0 means not retained.
    pub retention: u8,
    /// Recorded reference holders, one bit per process.
    pub refs: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataPlane {
    pub messages: Vec<MessageState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ControlPlane {
    pub members: u8,
    pub publishers: u8,
    /// One past the newest message delivered to each subscriber.
    pub watermarks: [u8; MAX_PROCESSES],
}

/// Program position and scratch registers of one actor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ActorState {
    pub pc: u8,
    pub micro: u8,
    pub members_seen: u8,
    pub refs_seen: u8,
    pub retained_seen: bool,
    pub history_seen: u8,
}

impl ActorState {
    fn next_op(&mut self) {
        *self = ActorState {
            pc: self.pc + 1,
            ..ActorState::default()
        };
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AbstractState {
    pub architecture: Architecture,
    pub data: DataPlane,
    pub control: ControlPlane,
    /// Per-publisher cached subscriber set (owner-driven only).
    pub caches: [u8; MAX_PROCESSES],
    pub crashed: u8,
    pub reclaimed: u8,
    /// Processes that really hold each message.
    pub live_refs: Vec<u8>,
    pub actors: Vec<ActorState>,
}

const fn bit(p: u8) -> u8 {
    1 << p
}

fn has(mask: u8, p: u8) -> bool {
    mask & bit(p) != 0
}

fn bits(mask: u8) -> impl Iterator<Item = u8> {
    (0..8).filter(move |&i| has(mask, i))
}

impl AbstractState {
    /// Messages that are reclaimed while some process holds them.
    pub fn premature(&self) -> u8 {
        (0..self.live_refs.len() as u8)
            .filter(|&m| has(self.reclaimed, m) && self.live_refs[m as usize] != 0)
            .fold(0, |acc, m| acc | bit(m))
    }

    fn sweep(&mut self) {
        for (m, msg) in self.data.messages.iter().enumerate() {
            if msg.published && msg.refs == 0 && msg.retention == 0 {
                self.reclaimed |= bit(m as u8);
            }
        }
    }

    fn publish(&mut self, m: u8, depth: u8, recipients: u8) {
        let publisher = self.data.messages[m as usize].publisher;
        for msg in self.data.messages.iter_mut() {
            if msg.published && msg.publisher == publisher {
                msg.retention = msg.retention.saturating_sub(1);
            }
        }
        let msg = &mut self.data.messages[m as usize];
        msg.published = true;
        msg.retention = depth;
        msg.refs = recipients;
        self.live_refs[m as usize] = recipients & self.control.members & !self.crashed;
        for q in bits(self.live_refs[m as usize]) {
            self.control.watermarks[q as usize] = m + 1;
        }
    }

    fn retained_history(&self) -> u8 {
        self.data
            .messages
            .iter()
            .enumerate()
            .filter(|(m, msg)| msg.published && msg.retention > 0 && !has(self.reclaimed, *m as u8))
            .fold(0, |acc, (m, _)| acc | bit(m as u8))
    }

    fn acquire(&mut self, p: u8, messages: u8) {
        for m in bits(messages) {
            self.data.messages[m as usize].refs |= bit(p);
            self.live_refs[m as usize] |= bit(p);
            let w = &mut self.control.watermarks[p as usize];
            *w = (*w).max(m + 1);
        }
    }

    fn drop_holdings(&mut self, p: u8, recorded: bool) {
        for m in 0..self.live_refs.len() {
            self.live_refs[m] &= !bit(p);
            if recorded {
                self.data.messages[m].refs &= !bit(p);
            }
        }
    }

    fn refresh_caches(&mut self) {
        for q in bits(self.control.publishers) {
            self.caches[q as usize] = self.control.members;
        }
    }

    /// Frees the messages of `publisher` that no process in `members`
    /// references and drops their retention.
    fn free_publisher(&mut self, publisher: u8, members: u8) {
        for (m, msg) in self.data.messages.iter_mut().enumerate() {
            if msg.publisher != publisher || !msg.published || has(self.reclaimed, m as u8) {
                continue;
            }
            msg.retention = 0;
            if msg.refs & members == 0 {
                self.reclaimed |= bit(m as u8);
            }
        }
    }
}

/// A scenario bound to an architecture.
#[derive(Debug, Clone)]
pub struct Model {
    scenario: Scenario,
    architecture: Architecture,
}

impl Model {
    pub fn new(scenario: Scenario, architecture: Architecture, bound: &Bound) -> Result<Self, RaceError> {
        scenario.validate(bound)?;
        Ok(Self { scenario, architecture })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn initial(&self) -> AbstractState {
        let s = &self.scenario;
        let members = s.initial.subscribers.iter().fold(0, |acc, &p| acc | bit(p));
        let publishers = s.initial.publishers.iter().fold(0, |acc, &p| acc | bit(p));
        let mut state = AbstractState {
            architecture: self.architecture,
            data: DataPlane {
                messages: s
                    .messages
                    .iter()
                    .map(|d| MessageState {
                        publisher: d.publisher,
                        published: false,
                        retention: 0,
                        refs: 0,
                    })
                    .collect(),
            },
            control: ControlPlane {
                members,
                publishers,
                watermarks: [0; MAX_PROCESSES],
            },
            caches: [0; MAX_PROCESSES],
            crashed: 0,
            reclaimed: 0,
            live_refs: vec![0; s.messages.len()],
            actors: vec![ActorState::default(); s.actors.len()],
        };
        state.refresh_caches();
        for &m in &s.initial.published {
            state.publish(m, s.depth, 0);
        }
        for h in &s.initial.holdings {
            state.acquire(h.process, bit(h.message));
        }
        if self.architecture == Architecture::SingleWriter {
            state.sweep();
        }
        state
    }

    /// The micro-step sequence of `op` under this model's architecture.
    pub fn micro_steps(&self, op: &Op) -> Vec<Micro> {
        use Micro::*;
        if self.architecture == Architecture::SingleWriter {
            return vec![Fused];
        }
        let late = self.scenario.cache_refresh == CacheRefresh::Late;
        let mut steps = match op {
            Op::SubscriberJoin => match self.scenario.durability {
                Durability::TransientLocal => vec![JoinRegister, JoinReadHistory, JoinAcquire],
                Durability::Volatile => vec![JoinRegister],
            },
            Op::SubscriberLeave => vec![LeaveRelease, Deregister],
            Op::SubscriberCrash { .. } => vec![CrashEvent, Deregister, ClearRefs],
            Op::PublisherJoin => vec![PublisherRegister],
            Op::PublisherLeave => vec![PublisherDeregister, PublisherFree],
            Op::PublisherCrash { .. } => vec![CrashEvent, PublisherDeregister, PublisherFree],
            Op::Publish { .. } => vec![Publish],
            Op::ReclamationCheck { .. } => vec![CheckReadMembers, CheckReadData, CheckDecide],
            Op::Release { .. } => vec![Release],
        };
        if late && matches!(op, Op::SubscriberJoin | Op::SubscriberLeave | Op::SubscriberCrash { .. }) {
            steps.push(RefreshCache);
        }
        steps
    }

    fn actor_stopped(&self, state: &AbstractState, actor: usize) -> bool {
        self.scenario.actors[actor]
            .process
            .is_some_and(|p| has(state.crashed, p))
    }

    /// All enabled next steps, at most one per actor, in actor order.
    pub fn enumerate_steps(&self, state: &AbstractState) -> Vec<OpStep> {
        let mut steps = Vec::new();
        for (i, decl) in self.scenario.actors.iter().enumerate() {
            let a = state.actors[i];
            if a.pc as usize >= decl.ops.len() || self.actor_stopped(state, i) {
                continue;
            }
            let op = decl.ops[a.pc as usize];
            steps.push(OpStep {
                actor: i as u8,
                op_index: a.pc,
                op,
                micro: self.micro_steps(&op)[a.micro as usize],
            });
        }
        steps
    }

    pub fn is_terminal(&self, state: &AbstractState) -> bool {
        self.enumerate_steps(state).is_empty()
    }

    fn subject(&self, actor: usize, op: &Op) -> u8 {
        match *op {
            Op::SubscriberCrash { target } | Op::PublisherCrash { target } => target,
            _ => self.scenario.actors[actor].process.expect("validated"),
        }
    }

    fn precondition(&self, state: &AbstractState, p: u8, op: &Op) -> bool {
        let msg = |m: u8| state.data.messages[m as usize];
        match *op {
            Op::SubscriberJoin => !has(state.control.members, p),
            Op::SubscriberLeave => has(state.control.members, p),
            Op::SubscriberCrash { .. } | Op::PublisherCrash { .. } => !has(state.crashed, p),
            Op::PublisherJoin => !has(state.control.publishers, p),
            Op::PublisherLeave => has(state.control.publishers, p),
            Op::Publish { message } => {
                !msg(message).published && msg(message).publisher == p && has(state.control.publishers, p)
            }
            Op::ReclamationCheck { message } => {
                msg(message).published && msg(message).publisher == p && !has(state.reclaimed, message)
            }
            Op::Release { message } => has(state.live_refs[message as usize], p),
        }
    }

    /// Executes `step`, which must be enabled in `state`.
    pub fn apply(&self, state: &AbstractState, step: &OpStep) -> AbstractState {
        let mut next = state.clone();
        let actor = step.actor as usize;
        let p = self.subject(actor, &step.op);
        let first = next.actors[actor].micro == 0;
        if first && !self.precondition(state, p, &step.op) {
            next.actors[actor].next_op();
            return next;
        }
        match self.architecture {
            Architecture::SingleWriter => {
                self.fused(&mut next, p, &step.op);
                next.sweep();
                next.actors[actor].next_op();
            }
            Architecture::OwnerDriven => {
                self.owner_driven(&mut next, actor, p, step);
                let len = self.micro_steps(&step.op).len() as u8;
                let a = &mut next.actors[actor];
                a.micro += 1;
                if a.micro == len {
                    a.next_op();
                }
            }
        }
        next
    }

    fn fused(&self, s: &mut AbstractState, p: u8, op: &Op) {
        let depth = self.scenario.depth;
        let volatile = self.scenario.durability == Durability::Volatile;
        match *op {
            Op::SubscriberJoin => {
                s.control.members |= bit(p);
                if !volatile {
                    let history = s.retained_history();
                    s.acquire(p, history);
                }
            }
            Op::SubscriberLeave => {
                s.drop_holdings(p, true);
                s.control.members &= !bit(p);
            }
            Op::SubscriberCrash { .. } => {
                s.crashed |= bit(p);
                s.drop_holdings(p, true);
                s.control.members &= !bit(p);
            }
            Op::PublisherJoin => s.control.publishers |= bit(p),
            Op::PublisherLeave | Op::PublisherCrash { .. } => {
                if matches!(op, Op::PublisherCrash { .. }) {
                    s.crashed |= bit(p);
                    s.drop_holdings(p, true);
                }
                s.control.publishers &= !bit(p);
                if volatile {
                    for msg in s.data.messages.iter_mut().filter(|m| m.publisher == p) {
                        msg.retention = 0;
                    }
                }
            }
            Op::Publish { message } => {
                let members = s.control.members;
                s.publish(message, depth, members);
            }
            Op::ReclamationCheck { .. } => {}
            Op::Release { message } => {
                s.data.messages[message as usize].refs &= !bit(p);
                s.live_refs[message as usize] &= !bit(p);
            }
        }
    }

    fn owner_driven(&self, s: &mut AbstractState, actor: usize, p: u8, step: &OpStep) {
        let early = self.scenario.cache_refresh == CacheRefresh::Early;
        match step.micro {
            Micro::Fused => unreachable!("owner-driven ops are never fused"),
            Micro::JoinRegister => {
                s.control.members |= bit(p);
                if early {
                    s.refresh_caches();
                }
            }
            Micro::JoinReadHistory => s.actors[actor].history_seen = s.retained_history(),
            Micro::JoinAcquire => {
                let seen = s.actors[actor].history_seen;
                s.acquire(p, seen);
            }
            Micro::RefreshCache => s.refresh_caches(),
            Micro::LeaveRelease => s.drop_holdings(p, true),
            Micro::Deregister => {
                s.control.members &= !bit(p);
                s.drop_holdings(p, false);
                if early {
                    s.refresh_caches();
                }
            }
            Micro::CrashEvent => {
                s.crashed |= bit(p);
                s.drop_holdings(p, false);
            }
            Micro::ClearRefs => {
                for msg in s.data.messages.iter_mut() {
                    msg.refs &= !bit(p);
                }
            }
            Micro::PublisherRegister => {
                s.control.publishers |= bit(p);
                s.caches[p as usize] = s.control.members;
            }
            Micro::PublisherDeregister => {
                s.control.publishers &= !bit(p);
                s.actors[actor].members_seen = s.control.members;
            }
            Micro::PublisherFree => {
                let seen = s.actors[actor].members_seen;
                s.free_publisher(p, seen);
            }
            Micro::Publish => {
                let Op::Publish { message } = step.op else { unreachable!() };
                let cache = s.caches[p as usize];
                s.publish(message, self.scenario.depth, cache);
            }
            Micro::CheckReadMembers => s.actors[actor].members_seen = s.control.members,
            Micro::CheckReadData => {
                let Op::ReclamationCheck { message } = step.op else { unreachable!() };
                let msg = s.data.messages[message as usize];
                let a = &mut s.actors[actor];
                a.refs_seen = msg.refs;
                a.retained_seen = msg.retention > 0 || has(s.reclaimed, message);
            }
            Micro::CheckDecide => {
                let Op::ReclamationCheck { message } = step.op else { unreachable!() };
                let a = s.actors[actor];
                if !a.retained_seen && a.refs_seen & a.members_seen == 0 {
                    s.reclaimed |= bit(message);
                }
            }
            Micro::Release => {
                let Op::Release { message } = step.op else { unreachable!() };
                s.data.messages[message as usize].refs &= !bit(p);
                s.live_refs[message as usize] &= !bit(p);
            }
        }
    }

    /// Messages leaked in a terminal state: unreclaimed, unretained and
    /// unheld even after every surviving owner runs one more reclamation
    /// check against the settled state.
    pub fn leaks(&self, state: &AbstractState) -> u8 {
        let mut s = state.clone();
        match self.architecture {
            Architecture::SingleWriter => s.sweep(),
            Architecture::OwnerDriven => {
                for (m, msg) in s.data.messages.iter().enumerate() {
                    let owner_alive = has(s.control.publishers, msg.publisher) && !has(s.crashed, msg.publisher);
                    if owner_alive && msg.published && msg.retention == 0 && msg.refs & s.control.members == 0 {
                        s.reclaimed |= bit(m as u8);
                    }
                }
            }
        }
        s.data
            .messages
            .iter()
            .enumerate()
            .filter(|(m, msg)| {
                let m = *m as u8;
                msg.published && msg.retention == 0 && !has(s.reclaimed, m) && s.live_refs[m as usize] == 0
            })
            .fold(0, |acc, (m, _)| acc | bit(m as u8))
    }
}
