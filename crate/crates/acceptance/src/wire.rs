//! Replays a random operation sequence through the socket protocol and
//! through an in-process broker side by side.
//!
//! Each simulated pid gets its own connection, and endpoint operations go
//! over the connection of the process that registered the endpoint. A crash
//! is a dropped connection. After every step both outcomes and the encoded
//! snapshots must be identical.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use pubsub_core::broker::Broker;
use pubsub_core::proto::{encode_snapshot, BrokerServer, ProtoClient, ProtoError};
use pubsub_core::Pid;
use pubsub_refsim::workload::{apply_broker, apply_port, Op, Outcome, TOPICS};

/// Connection used for snapshots and for operations on endpoints that do
/// not exist; never registers anything.
const OBSERVER: Pid = Pid(u32::MAX);

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("protocol failure: {0}")]
    Proto(#[from] ProtoError),
    #[error("step {step} ({op:?}): {detail}")]
    Diverged { step: usize, op: Op, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Endpoint {
    Publisher(usize, u32),
    Subscriber(usize, u32),
}

struct Connections<'a> {
    socket: &'a Path,
    by_pid: HashMap<Pid, Arc<ProtoClient>>,
}

impl Connections<'_> {
    fn get(&mut self, pid: Pid) -> Result<Arc<ProtoClient>, ProtoError> {
        if let Some(c) = self.by_pid.get(&pid) {
            return Ok(c.clone());
        }
        let c = Arc::new(ProtoClient::connect(self.socket, pid)?);
        self.by_pid.insert(pid, c.clone());
        Ok(c)
    }
}

fn target(op: &Op) -> Option<Endpoint> {
    match *op {
        Op::UnregisterPub { topic, id } | Op::Publish { topic, id, .. } => Some(Endpoint::Publisher(topic, id)),
        Op::UnregisterSub { topic, id } | Op::Receive { topic, id } | Op::Release { topic, id, .. } => {
            Some(Endpoint::Subscriber(topic, id))
        }
        _ => None,
    }
}

/// Runs `ops` against a fresh server listening on `socket` and a fresh
/// in-process broker. Returns the number of steps compared.
pub fn compare(ops: &[Op], socket: &Path) -> Result<usize, WireError> {
    let server = BrokerServer::bind(socket, Arc::new(Broker::default()))?.spawn();
    let local = Broker::default();
    let mut conns = Connections {
        socket,
        by_pid: HashMap::new(),
    };
    let observer = conns.get(OBSERVER)?;
    let mut owners: HashMap<Endpoint, Pid> = HashMap::new();
    let result = (|| {
        for (step, op) in ops.iter().enumerate() {
            let diverged = |detail: String| WireError::Diverged {
                step,
                op: op.clone(),
                detail,
            };
            let want = apply_broker(&local, op);
            match op {
                Op::Crash { pid } => {
                    if let Some(c) = conns.by_pid.remove(pid) {
                        c.disconnect();
                    }
                    owners.retain(|_, owner| owner != pid);
                }
                _ => {
                    let pid = match op {
                        Op::RegisterPub { pid, .. } | Op::RegisterSub { pid, .. } => *pid,
                        _ => target(op).and_then(|e| owners.get(&e).copied()).unwrap_or(OBSERVER),
                    };
                    let client = conns.get(pid)?;
                    let got = apply_port(&*client, op, &mut |_| unreachable!("crashes go through disconnect"));
                    if got != want {
                        return Err(diverged(format!("wire {got:?}, in-process {want:?}")));
                    }
                    match (op, &got) {
                        (Op::RegisterPub { topic, pid, .. }, Outcome::Publisher(id)) => {
                            owners.insert(Endpoint::Publisher(*topic, *id), *pid);
                        }
                        (Op::RegisterSub { topic, pid, .. }, Outcome::Subscriber { id, .. }) => {
                            owners.insert(Endpoint::Subscriber(*topic, *id), *pid);
                        }
                        (Op::UnregisterPub { .. } | Op::UnregisterSub { .. }, Outcome::Evicted(_)) => {
                            owners.remove(&target(op).expect("endpoint op"));
                        }
                        _ => {}
                    }
                }
            }
            let remote = observer.snapshot(None).map_err(|e| diverged(format!("wire snapshot: {e}")))?;
            let mine = local.snapshot(None).map_err(|e| diverged(format!("in-process snapshot: {e}")))?;
            if encode_snapshot(&remote)? != encode_snapshot(&mine)? {
                return Err(diverged(format!(
                    "snapshots differ in {:?}",
                    TOPICS.iter().find(|t| remote.topic(t) != mine.topic(t))
                )));
            }
        }
        Ok(ops.len())
    })();
    for c in conns.by_pid.values() {
        c.disconnect();
    }
    server.stop();
    result
}
