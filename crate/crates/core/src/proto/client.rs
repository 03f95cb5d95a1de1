use std::io::{BufReader, BufWriter, Read};
use std::os::unix::net::UnixStream;
use std::path::Path;

use parking_lot::Mutex;

use super::codec::{decode_response, encode_request, read_frame, write_frame};
use super::{ProtoError, Reply, Request, RequestFrame, PROTOCOL_VERSION};
use crate::arena::ArenaRef;
use crate::broker::{BrokerError, Delivery, MetadataPort, PublishOutcome, Snapshot, SubscriberRegistration};
use crate::types::{EntryId, Pid, PublisherId, Qos, SubscriberId};

struct Conn {
    reader: BufReader<UnixStream>,
    writer: BufWriter<UnixStream>,
    next_id: u64,
}

/// Client side of one process's broker connection. Requests are issued one
/// at a time in order.
pub struct ProtoClient {
    pid: Pid,
    conn: Mutex<Option<Conn>>,
    deferred: Mutex<Vec<ArenaRef>>,
}

fn transport(e: ProtoError) -> BrokerError {
    BrokerError::Transport(e.to_string())
}

impl ProtoClient {
    /// Connects and introduces the process with a hello frame.
    pub fn connect(path: impl AsRef<Path>, pid: Pid) -> Result<Self, ProtoError> {
        let stream = UnixStream::connect(path)?;
        let client = Self {
            pid,
            conn: Mutex::new(Some(Conn {
                reader: BufReader::new(stream.try_clone()?),
                writer: BufWriter::new(stream),
                next_id: 1,
            })),
            deferred: Mutex::new(Vec::new()),
        };
        match client.call(Request::Hello {
            version: PROTOCOL_VERSION,
            pid,
        }) {
            Ok(Ok(Reply::Hello { version: PROTOCOL_VERSION })) => Ok(client),
            Ok(Ok(Reply::Hello { version })) => Err(ProtoError::VersionMismatch(version)),
            Ok(Err(e)) => Err(ProtoError::Io(e.to_string())),
            Ok(Ok(other)) => Err(ProtoError::MalformedFrame(format!("unexpected hello reply {other:?}"))),
            Err(e) => Err(e),
        }
    }

    pub fn pid(&self) -> Pid {
        self.pid
    }

    /// Sends one request and waits for its response.
    pub fn call(&self, request: Request) -> Result<Result<Reply, BrokerError>, ProtoError> {
        let mut guard = self.conn.lock();
        let conn = guard.as_mut().ok_or_else(|| ProtoError::Io("connection closed".into()))?;
        let request_id = conn.next_id;
        conn.next_id += 1;
        let frame = encode_request(&RequestFrame { request_id, request })?;
        write_frame(&mut conn.writer, &frame)?;
        let reply = read_frame(&mut conn.reader)?.ok_or_else(|| ProtoError::Io("broker closed connection".into()))?;
        let response = decode_response(&reply)?;
        if response.request_id != request_id {
            return Err(ProtoError::MalformedFrame(format!(
                "response id {} for request {request_id}",
                response.request_id
            )));
        }
        Ok(response.result)
    }

    fn request(&self, request: Request) -> Result<Reply, BrokerError> {
        self.call(request).map_err(transport)?
    }

    pub fn snapshot(&self, topic: Option<&str>) -> Result<Snapshot, BrokerError> {
        match self.request(Request::Snapshot {
            topic: topic.map(str::to_owned),
        })? {
            Reply::Snapshot(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }

    /// Payloads of this process's arena evicted by other clients; returned
    /// piggybacked on publish replies.
    pub fn take_deferred(&self) -> Vec<ArenaRef> {
        std::mem::take(&mut *self.deferred.lock())
    }

    /// Closes the connection and blocks until the broker has finished the
    /// process-exit cleanup it triggers.
    pub fn disconnect(&self) {
        let Some(conn) = self.conn.lock().take() else {
            return;
        };
        let mut stream = conn.reader.into_inner();
        let _ = stream.shutdown(std::net::Shutdown::Write);
        drop(conn.writer);
        let mut sink = [0u8; 64];
        while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
    }
}

fn unexpected(r: Reply) -> BrokerError {
    BrokerError::Transport(format!("unexpected reply {r:?}"))
}

fn check_topic(topic: &str) -> Result<(), BrokerError> {
    if topic.is_empty() || topic.len() > 255 {
        return Err(BrokerError::InvalidTopicName);
    }
    Ok(())
}

impl MetadataPort for ProtoClient {
    fn register_publisher(&self, topic: &str, qos: Qos, pid: Pid) -> Result<PublisherId, BrokerError> {
        check_topic(topic)?;
        match self.request(Request::RegisterPub {
            topic: topic.to_owned(),
            qos,
            pid,
        })? {
            Reply::Publisher(id) => Ok(id),
            other => Err(unexpected(other)),
        }
    }

    fn register_subscriber(&self, topic: &str, qos: Qos, pid: Pid) -> Result<SubscriberRegistration, BrokerError> {
        check_topic(topic)?;
        match self.request(Request::RegisterSub {
            topic: topic.to_owned(),
            qos,
            pid,
        })? {
            Reply::Subscriber(reg) => Ok(reg),
            other => Err(unexpected(other)),
        }
    }

    fn unregister_publisher(&self, topic: &str, id: PublisherId) -> Result<Vec<ArenaRef>, BrokerError> {
        check_topic(topic).map_err(|_| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        match self.request(Request::UnregisterPub {
            topic: topic.to_owned(),
            id,
        })? {
            Reply::Evicted(refs) => Ok(refs),
            other => Err(unexpected(other)),
        }
    }

    fn unregister_subscriber(&self, topic: &str, id: SubscriberId) -> Result<Vec<ArenaRef>, BrokerError> {
        check_topic(topic).map_err(|_| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        match self.request(Request::UnregisterSub {
            topic: topic.to_owned(),
            id,
        })? {
            Reply::Evicted(refs) => Ok(refs),
            other => Err(unexpected(other)),
        }
    }

    fn publish_entry(&self, topic: &str, publisher: PublisherId, payload: ArenaRef) -> Result<PublishOutcome, BrokerError> {
        check_topic(topic).map_err(|_| BrokerError::TopicGone(topic.to_owned()))?;
        match self.request(Request::Publish {
            topic: topic.to_owned(),
            publisher,
            payload,
        })? {
            Reply::Published { outcome, deferred } => {
                if !deferred.is_empty() {
                    self.deferred.lock().extend(deferred);
                }
                Ok(outcome)
            }
            other => Err(unexpected(other)),
        }
    }

    fn receive_entries(&self, topic: &str, subscriber: SubscriberId) -> Result<Vec<Delivery>, BrokerError> {
        check_topic(topic).map_err(|_| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        match self.request(Request::Receive {
            topic: topic.to_owned(),
            subscriber,
        })? {
            Reply::Deliveries(ds) => Ok(ds),
            other => Err(unexpected(other)),
        }
    }

    fn release_reference(&self, topic: &str, subscriber: SubscriberId, entry: EntryId) -> Result<(), BrokerError> {
        check_topic(topic).map_err(|_| BrokerError::UnknownEndpoint(topic.to_owned()))?;
        match self.request(Request::Release {
            topic: topic.to_owned(),
            subscriber,
            entry,
        })? {
            Reply::Released => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    /// Only this client's own process can exit through its connection.
    fn process_exit(&self, pid: Pid) -> Result<Vec<ArenaRef>, BrokerError> {
        if pid != self.pid {
            return Err(BrokerError::Remote(format!("{pid} is not this connection's process")));
        }
        self.disconnect();
        Ok(Vec::new())
    }
}

/// Reclaimer for a process talking to a remote broker: frees evicted refs
/// of its own arena, including those another client's membership change
/// evicted and the broker handed back on a publish reply.
pub struct RemoteReclaimer {
    client: std::sync::Arc<ProtoClient>,
    own: crate::client::OwnArenaReclaimer,
}

impl RemoteReclaimer {
    pub fn new(client: std::sync::Arc<ProtoClient>, arena: std::sync::Arc<crate::arena::Arena>) -> Self {
        Self {
            client,
            own: crate::client::OwnArenaReclaimer(arena),
        }
    }
}

impl crate::client::Reclaimer for RemoteReclaimer {
    fn reclaim(&self, refs: &[ArenaRef]) {
        self.own.reclaim(refs);
        let deferred = self.client.take_deferred();
        if !deferred.is_empty() {
            self.own.reclaim(&deferred);
        }
    }
}
