use std::collections::{BTreeSet, HashMap};
use std::io::{BufReader, BufWriter};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;

use super::codec::{decode_request, encode_response, read_frame, split_frame, write_frame};
use super::{ProtoError, Reply, Request, ResponseFrame, PROTOCOL_VERSION};
use crate::arena::ArenaRef;
use crate::broker::{Broker, BrokerError};
use crate::types::Pid;

struct Shared {
    broker: Arc<Broker>,
    /// Evicted payloads waiting for their owning process (arena id = pid)
    /// to pick them up with its next publish.
    deferred: Mutex<HashMap<u64, Vec<ArenaRef>>>,
    exits: AtomicU64,
    stopping: AtomicBool,
}

impl Shared {
    /// Queues the refs that do not belong to `requester` for their owners.
    fn defer_foreign(&self, requester: &BTreeSet<Pid>, refs: &[ArenaRef]) {
        let mut deferred = self.deferred.lock();
        for r in refs {
            let own = u32::try_from(r.arena_id).is_ok_and(|id| requester.contains(&Pid(id)));
            if !own {
                deferred.entry(r.arena_id).or_default().push(*r);
            }
        }
    }

    fn take_deferred(&self, arena_id: u64) -> Vec<ArenaRef> {
        self.deferred.lock().remove(&arena_id).unwrap_or_default()
    }

    fn handle(&self, pids: &mut BTreeSet<Pid>, request: Request) -> Result<Reply, BrokerError> {
        let b = &self.broker;
        match request {
            Request::Hello { version, pid } => {
                if version != PROTOCOL_VERSION {
                    return Err(BrokerError::Remote(format!("unsupported protocol version {version}")));
                }
                pids.insert(pid);
                Ok(Reply::Hello {
                    version: PROTOCOL_VERSION,
                })
            }
            Request::RegisterPub { topic, qos, pid } => {
                let id = b.register_publisher(&topic, qos, pid)?;
                pids.insert(pid);
                Ok(Reply::Publisher(id))
            }
            Request::RegisterSub { topic, qos, pid } => {
                let reg = b.register_subscriber(&topic, qos, pid)?;
                pids.insert(pid);
                Ok(Reply::Subscriber(reg))
            }
            Request::UnregisterPub { topic, id } => {
                let evicted = b.unregister_publisher(&topic, id)?;
                self.defer_foreign(pids, &evicted);
                Ok(Reply::Evicted(evicted))
            }
            Request::UnregisterSub { topic, id } => {
                let evicted = b.unregister_subscriber(&topic, id)?;
                self.defer_foreign(pids, &evicted);
                Ok(Reply::Evicted(evicted))
            }
            Request::Publish {
                topic,
                publisher,
                payload,
            } => {
                let outcome = b.publish_entry(&topic, publisher, payload)?;
                let deferred = self.take_deferred(payload.arena_id);
                Ok(Reply::Published { outcome, deferred })
            }
            Request::Receive { topic, subscriber } => Ok(Reply::Deliveries(b.receive_entries(&topic, subscriber)?)),
            Request::Release {
                topic,
                subscriber,
                entry,
            } => {
                b.release_reference(&topic, subscriber, entry)?;
                Ok(Reply::Released)
            }
            Request::Snapshot { topic } => Ok(Reply::Snapshot(b.snapshot(topic.as_deref())?)),
        }
    }

    fn serve_connection(&self, stream: UnixStream) {
        let mut pids = BTreeSet::new();
        if let Err(e) = self.request_loop(&stream, &mut pids) {
            log::debug!("connection closed: {e}");
        }
        for pid in &pids {
            let evicted = self.broker.handle_process_exit(*pid);
            self.defer_foreign(&BTreeSet::new(), &evicted);
            self.exits.fetch_add(1, Ordering::AcqRel);
        }
        // The client waits for EOF to learn that cleanup finished.
        let _ = stream.shutdown(std::net::Shutdown::Both);
    }

    fn request_loop(&self, stream: &UnixStream, pids: &mut BTreeSet<Pid>) -> Result<(), ProtoError> {
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream.try_clone()?);
        while let Some(frame) = read_frame(&mut reader)? {
            let (request_id, opcode, _) = split_frame(&frame)?;
            let result = match decode_request(&frame) {
                Ok(f) => self.handle(pids, f.request),
                Err(e) => Err(BrokerError::Remote(e.to_string())),
            };
            let response = ResponseFrame {
                request_id,
                opcode,
                result,
            };
            write_frame(&mut writer, &encode_response(&response)?)?;
        }
        Ok(())
    }
}

/// Broker process front end: accepts client connections on a Unix socket.
pub struct BrokerServer {
    listener: UnixListener,
    path: PathBuf,
    shared: Arc<Shared>,
}

impl BrokerServer {
    /// Binds `path`, replacing a stale socket file.
    pub fn bind(path: impl AsRef<Path>, broker: Arc<Broker>) -> Result<Self, ProtoError> {
        let path = path.as_ref().to_path_buf();
        if path.exists() {
            std::fs::remove_file(&path)?;
        }
        let listener = UnixListener::bind(&path)?;
        Ok(Self {
            listener,
            path,
            shared: Arc::new(Shared {
                broker,
                deferred: Mutex::new(HashMap::new()),
                exits: AtomicU64::new(0),
                stopping: AtomicBool::new(false),
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Accepts connections until stopped, one thread per connection.
    pub fn serve(&self) {
        for stream in self.listener.incoming() {
            if self.shared.stopping.load(Ordering::Acquire) {
                break;
            }
            match stream {
                Ok(s) => {
                    let shared = self.shared.clone();
                    std::thread::spawn(move || shared.serve_connection(s));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }

    /// Runs [`serve`](Self::serve) on a background thread.
    pub fn spawn(self) -> ServerHandle {
        let shared = self.shared.clone();
        let path = self.path.clone();
        let thread = std::thread::spawn(move || self.serve());
        ServerHandle {
            shared,
            path,
            thread: Some(thread),
        }
    }
}

pub struct ServerHandle {
    shared: Arc<Shared>,
    path: PathBuf,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.shared.broker
    }

    /// Number of process-exit cleanups run for closed connections.
    pub fn exits_handled(&self) -> u64 {
        self.shared.exits.load(Ordering::Acquire)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        let Some(thread) = self.thread.take() else {
            return;
        };
        self.shared.stopping.store(true, Ordering::Release);
        // Wake the accept loop.
        let _ = UnixStream::connect(&self.path);
        let _ = thread.join();
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
