use std::path::PathBuf;
use std::sync::Arc;

use super::{ProtoClient, ProtoError, RemoteReclaimer};
use crate::arena::{create_segment, segment_path, Arena, ShmArena, ShmDirectory};
use crate::client::{Participant, ParticipantParts};
use crate::notify::MqNotifier;
use crate::types::Pid;

/// Where a process finds the broker and the shared-memory segments.
#[derive(Debug, Clone)]
pub struct RemoteSetup {
    pub socket: PathBuf,
    pub pid: Pid,
    pub shm_root: PathBuf,
    /// Namespace for segment files and wakeup queue names.
    pub prefix: String,
    pub arena_capacity: u64,
}

/// A participant whose broker is a separate process.
pub struct RemoteParticipant {
    pub participant: Participant,
    pub client: Arc<ProtoClient>,
    pub notifier: Arc<MqNotifier>,
}

/// Creates this process's segment, connects to the broker and wires a
/// participant with POSIX message queue wakeups.
pub fn connect_participant(setup: &RemoteSetup) -> Result<RemoteParticipant, ProtoError> {
    let arena_id = setup.pid.0 as u64;
    let path = segment_path(&setup.shm_root, &setup.prefix, arena_id);
    let io = |e: crate::arena::ArenaError| ProtoError::Io(e.to_string());
    create_segment(&path, setup.arena_capacity).map_err(io)?;
    let arena = Arc::new(Arena::Shm(ShmArena::open_writer(&path, arena_id).map_err(io)?));
    let directory = Arc::new(ShmDirectory::new(&setup.shm_root, &setup.prefix));
    directory.insert(arena.clone());
    let client = Arc::new(ProtoClient::connect(&setup.socket, setup.pid)?);
    let notifier = Arc::new(MqNotifier::new(setup.prefix.clone()));
    let participant = Participant::new(ParticipantParts {
        pid: setup.pid,
        port: client.clone(),
        arenas: directory,
        arena: arena.clone(),
        notifier: notifier.clone(),
        reclaimer: Arc::new(RemoteReclaimer::new(client.clone(), arena)),
    });
    Ok(RemoteParticipant {
        participant,
        client,
        notifier,
    })
}
