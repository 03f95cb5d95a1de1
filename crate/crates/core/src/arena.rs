//! Payload storage for published messages.
//!
//! An arena is a byte region owned by one publisher process. Messages are
//! constructed once in a slot, then read by any number of subscribers until
//! the broker hands the slot back for reclamation.
//!
//! Two backends share the same contract:
//!
//! * [`InProcArena`]: a heap buffer used by tests, the race lab and the
//!   single-process benchmark. Reclaimed slots are overwritten with
//!   [`POISON_BYTE`] and every live handle pins its slot, so a premature
//!   reclamation is observable as [`ArenaError::PoisonedPayload`].
//! * [`ShmArena`]: a file-backed shared mapping under a directory such as
//!   `/dev/shm/<prefix>/<arena_id>`. No poisoning.
//!
//! Slots are handed out by a first-fit free list with coalescing. Slot sizes
//! are rounded up to [`SLOT_ALIGN`]; the `length` in an [`ArenaRef`] is the
//! requested length.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::ops::{Deref, DerefMut};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use memmap2::{Mmap, MmapMut};
use parking_lot::{MappedRwLockReadGuard, MappedRwLockWriteGuard, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use thiserror::Error;

/// Byte written over every reclaimed slot in the in-process backend.
pub const POISON_BYTE: u8 = 0xDE;

/// Allocation granularity in bytes.
pub const SLOT_ALIGN: u64 = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArenaError {
    #[error("arena {arena_id} cannot satisfy an allocation of {requested} bytes")]
    ArenaExhausted { arena_id: u64, requested: u64 },
    #[error("payload at {0} was reclaimed while still referenced")]
    PoisonedPayload(ArenaRef),
    #[error("unknown arena reference {0}")]
    UnknownRef(ArenaRef),
    #[error("slot {0} reclaimed twice")]
    DoubleReclaim(ArenaRef),
    #[error("arena {0} is mapped read-only in this process")]
    ReadOnly(u64),
    #[error("shared-memory segment error: {0}")]
    Io(String),
}

/// Location of a payload: owning arena, byte offset and length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArenaRef {
    pub arena_id: u64,
    pub offset: u64,
    pub length: u64,
}

impl std::fmt::Display for ArenaRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}+{}", self.arena_id, self.offset, self.length)
    }
}

/// Capacity accounting. `live_bytes + free_bytes + quarantined_bytes == capacity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ArenaStats {
    pub capacity: u64,
    pub live_slots: usize,
    pub live_bytes: u64,
    pub free_bytes: u64,
    pub quarantined_bytes: u64,
    /// Reclaims of slots that still had a pinning handle (R1 violations).
    pub reclaimed_while_pinned: u64,
    /// `PoisonedPayload` results handed out by `resolve`.
    pub poisoned_observations: u64,
}

fn aligned(len: u64) -> u64 {
    len.max(1).div_ceil(SLOT_ALIGN) * SLOT_ALIGN
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    length: u64,
    size: u64,
    pins: u32,
    quarantined: bool,
}

/// First-fit free list plus the live slot table.
#[derive(Debug)]
struct SlotTable {
    capacity: u64,
    free: BTreeMap<u64, u64>,
    live: HashMap<u64, Slot>,
}

impl SlotTable {
    fn new(capacity: u64) -> Self {
        let mut free = BTreeMap::new();
        if capacity > 0 {
            free.insert(0, capacity);
        }
        Self {
            capacity,
            free,
            live: HashMap::new(),
        }
    }

    fn allocate(&mut self, length: u64) -> Option<u64> {
        let size = aligned(length);
        let (&offset, &run) = self.free.iter().find(|(_, &run)| run >= size)?;
        self.free.remove(&offset);
        if run > size {
            self.free.insert(offset + size, run - size);
        }
        self.live.insert(
            offset,
            Slot {
                length,
                size,
                pins: 0,
                quarantined: false,
            },
        );
        Some(offset)
    }

    fn release_range(&mut self, offset: u64, size: u64) {
        let mut start = offset;
        let mut len = size;
        if let Some((&prev, &prev_len)) = self.free.range(..offset).next_back() {
            if prev + prev_len == offset {
                self.free.remove(&prev);
                start = prev;
                len += prev_len;
            }
        }
        if let Some(&next_len) = self.free.get(&(offset + size)) {
            self.free.remove(&(offset + size));
            len += next_len;
        }
        self.free.insert(start, len);
    }

    fn slot(&self, r: &ArenaRef) -> Option<&Slot> {
        self.live.get(&r.offset).filter(|s| s.length == r.length)
    }

    fn in_bounds(&self, r: &ArenaRef) -> bool {
        r.offset.checked_add(r.length).is_some_and(|end| end <= self.capacity)
    }

    fn stats(&self) -> (usize, u64, u64, u64) {
        let mut live_slots = 0;
        let mut live_bytes = 0;
        let mut quarantined = 0;
        for slot in self.live.values() {
            if slot.quarantined {
                quarantined += slot.size;
            } else {
                live_slots += 1;
                live_bytes += slot.size;
            }
        }
        let free = self.free.values().sum();
        (live_slots, live_bytes, free, quarantined)
    }
}

/// Read-only view of a payload.
pub struct PayloadView<'a>(ViewInner<'a>);

enum ViewInner<'a> {
    Locked(MappedRwLockReadGuard<'a, [u8]>),
    Mapped(&'a [u8]),
}

impl Deref for PayloadView<'_> {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        match &self.0 {
            ViewInner::Locked(g) => g,
            ViewInner::Mapped(s) => s,
        }
    }
}

impl std::fmt::Debug for PayloadView<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PayloadView").field("len", &self.len()).finish()
    }
}

/// Writable view of a loaned payload. Only the owning publisher gets one.
pub struct PayloadViewMut<'a>(ViewMutInner<'a>);

enum ViewMutInner<'a> {
    Locked(MappedRwLockWriteGuard<'a, [u8]>),
    Mapped(&'a mut [u8]),
}

impl Deref for PayloadViewMut<'_> {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        match &self.0 {
            ViewMutInner::Locked(g) => g,
            ViewMutInner::Mapped(s) => s,
        }
    }
}

impl DerefMut for PayloadViewMut<'_> {
    fn deref_mut(&mut self) -> &mut [u8] {
        match &mut self.0 {
            ViewMutInner::Locked(g) => g,
            ViewMutInner::Mapped(s) => s,
        }
    }
}

impl std::fmt::Debug for PayloadViewMut<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PayloadViewMut").field("len", &self.len()).finish()
    }
}

/// Heap-backed arena with poisoning and pin tracking.
///
/// Pins are ground truth kept outside the lifetime protocol: each live
/// message handle pins its slot. Reclaiming a pinned slot quarantines it
/// (it is poisoned but not reused) until the last pin goes away, so a stale
/// read can never silently alias a newer message.
pub struct InProcArena {
    id: u64,
    capacity: u64,
    bytes: RwLock<Box<[u8]>>,
    slots: Mutex<SlotTable>,
    reclaimed_while_pinned: AtomicU64,
    poisoned_observations: AtomicU64,
}

impl std::fmt::Debug for InProcArena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InProcArena")
            .field("id", &self.id)
            .field("capacity", &self.capacity)
            .finish_non_exhaustive()
    }
}

impl InProcArena {
    pub fn new(id: u64, capacity: u64) -> Self {
        Self {
            id,
            capacity,
            bytes: RwLock::new(vec![0u8; capacity as usize].into_boxed_slice()),
            slots: Mutex::new(SlotTable::new(capacity)),
            reclaimed_while_pinned: AtomicU64::new(0),
            poisoned_observations: AtomicU64::new(0),
        }
    }

    fn allocate(&self, length: u64) -> Result<ArenaRef, ArenaError> {
        let offset = self.slots.lock().allocate(length).ok_or(ArenaError::ArenaExhausted {
            arena_id: self.id,
            requested: length,
        })?;
        Ok(ArenaRef {
            arena_id: self.id,
            offset,
            length,
        })
    }

    fn check_live(&self, table: &SlotTable, r: &ArenaRef) -> Result<(), ArenaError> {
        if r.arena_id != self.id || !table.in_bounds(r) {
            return Err(ArenaError::UnknownRef(*r));
        }
        match table.slot(r) {
            Some(slot) if !slot.quarantined => Ok(()),
            _ => {
                self.poisoned_observations.fetch_add(1, Ordering::Relaxed);
                Err(ArenaError::PoisonedPayload(*r))
            }
        }
    }

    fn resolve(&self, r: &ArenaRef) -> Result<PayloadView<'_>, ArenaError> {
        self.check_live(&self.slots.lock(), r)?;
        // recursive: a thread may hold several views while a reclaim waits
        let guard = self.bytes.read_recursive();
        let (start, end) = (r.offset as usize, (r.offset + r.length) as usize);
        Ok(PayloadView(ViewInner::Locked(RwLockReadGuard::map(guard, |b| &b[start..end]))))
    }

    fn resolve_mut(&self, r: &ArenaRef) -> Result<PayloadViewMut<'_>, ArenaError> {
        self.check_live(&self.slots.lock(), r)?;
        let guard = self.bytes.write();
        let (start, end) = (r.offset as usize, (r.offset + r.length) as usize);
        Ok(PayloadViewMut(ViewMutInner::Locked(RwLockWriteGuard::map(guard, |b| {
            &mut b[start..end]
        }))))
    }

    fn reclaim(&self, r: &ArenaRef) -> Result<(), ArenaError> {
        let size = {
            let mut table = self.slots.lock();
            if r.arena_id != self.id || !table.in_bounds(r) {
                return Err(ArenaError::UnknownRef(*r));
            }
            let slot = match table.live.get_mut(&r.offset) {
                Some(slot) if slot.length == r.length && !slot.quarantined => slot,
                _ => return Err(ArenaError::DoubleReclaim(*r)),
            };
            if slot.pins > 0 {
                self.reclaimed_while_pinned.fetch_add(1, Ordering::Relaxed);
            }
            // Quarantined until the poison fill is done, so the range cannot
            // be handed out again in between.
            slot.quarantined = true;
            slot.pins += 1;
            slot.size
        };
        self.bytes.write()[r.offset as usize..(r.offset + size) as usize].fill(POISON_BYTE);
        self.unpin(r);
        Ok(())
    }

    fn pin(&self, r: &ArenaRef) {
        if let Some(slot) = self.slots.lock().live.get_mut(&r.offset) {
            if slot.length == r.length {
                slot.pins += 1;
            }
        }
    }

    fn unpin(&self, r: &ArenaRef) {
        let mut table = self.slots.lock();
        let Some(slot) = table.live.get_mut(&r.offset) else {
            return;
        };
        if slot.length != r.length || slot.pins == 0 {
            return;
        }
        slot.pins -= 1;
        if slot.pins == 0 && slot.quarantined {
            let size = slot.size;
            table.live.remove(&r.offset);
            table.release_range(r.offset, size);
        }
    }

    fn stats(&self) -> ArenaStats {
        let table = self.slots.lock();
        let (live_slots, live_bytes, free_bytes, quarantined_bytes) = table.stats();
        ArenaStats {
            capacity: self.capacity,
            live_slots,
            live_bytes,
            free_bytes,
            quarantined_bytes,
            reclaimed_while_pinned: self.reclaimed_while_pinned.load(Ordering::Relaxed),
            poisoned_observations: self.poisoned_observations.load(Ordering::Relaxed),
        }
    }
}

/// Path of the segment backing `arena_id` under `root/prefix`.
pub fn segment_path(root: &Path, prefix: &str, arena_id: u64) -> PathBuf {
    root.join(prefix).join(arena_id.to_string())
}

/// Default directory for shared-memory segments.
pub fn default_shm_root() -> PathBuf {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        shm.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}

/// Creates (or truncates) a zero-filled segment file of `capacity` bytes.
pub fn create_segment(path: &Path, capacity: u64) -> Result<(), ArenaError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| ArenaError::Io(e.to_string()))?;
    }
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(|e| ArenaError::Io(format!("{}: {e}", path.display())))?;
    file.set_len(capacity).map_err(|e| ArenaError::Io(e.to_string()))?;
    Ok(())
}

enum Mapping {
    Writer { map: MmapMut, slots: Mutex<SlotTable> },
    Reader(Mmap),
}

/// Shared-memory arena mapped from a segment file.
///
/// The writer side owns the slot allocator; readers only resolve offsets.
pub struct ShmArena {
    id: u64,
    capacity: u64,
    path: PathBuf,
    mapping: Mapping,
}

impl std::fmt::Debug for ShmArena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShmArena")
            .field("id", &self.id)
            .field("path", &self.path)
            .field("writer", &matches!(self.mapping, Mapping::Writer { .. }))
            .finish()
    }
}

fn open_segment(path: &Path, write: bool) -> Result<File, ArenaError> {
    OpenOptions::new()
        .read(true)
        .write(write)
        .open(path)
        .map_err(|e| ArenaError::Io(format!("{}: {e}", path.display())))
}

impl ShmArena {
    /// Maps an existing segment for writing. Used by the publisher process.
    pub fn open_writer(path: &Path, arena_id: u64) -> Result<Self, ArenaError> {
        let file = open_segment(path, true)?;
        // SAFETY: the segment is a regular file created for this arena. Slot
        // ranges handed out by the allocator are disjoint, and readers in
        // other processes only read slots after publish.
        let map = unsafe { MmapMut::map_mut(&file) }.map_err(|e| ArenaError::Io(e.to_string()))?;
        let capacity = map.len() as u64;
        Ok(Self {
            id: arena_id,
            capacity,
            path: path.to_path_buf(),
            mapping: Mapping::Writer {
                map,
                slots: Mutex::new(SlotTable::new(capacity)),
            },
        })
    }

    /// Maps an existing segment read-only. Used by subscriber processes.
    pub fn open_reader(path: &Path, arena_id: u64) -> Result<Self, ArenaError> {
        let file = open_segment(path, false)?;
        // SAFETY: read-only mapping; the writer never modifies a slot after
        // it has been published.
        let map = unsafe { Mmap::map(&file) }.map_err(|e| ArenaError::Io(e.to_string()))?;
        Ok(Self {
            id: arena_id,
            capacity: map.len() as u64,
            path: path.to_path_buf(),
            mapping: Mapping::Reader(map),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn bounds(&self, r: &ArenaRef) -> Result<(usize, usize), ArenaError> {
        if r.arena_id != self.id {
            return Err(ArenaError::UnknownRef(*r));
        }
        match r.offset.checked_add(r.length) {
            Some(end) if end <= self.capacity => Ok((r.offset as usize, end as usize)),
            _ => Err(ArenaError::UnknownRef(*r)),
        }
    }

    fn allocate(&self, length: u64) -> Result<ArenaRef, ArenaError> {
        let Mapping::Writer { slots, .. } = &self.mapping else {
            return Err(ArenaError::ReadOnly(self.id));
        };
        let offset = slots.lock().allocate(length).ok_or(ArenaError::ArenaExhausted {
            arena_id: self.id,
            requested: length,
        })?;
        Ok(ArenaRef {
            arena_id: self.id,
            offset,
            length,
        })
    }

    fn resolve(&self, r: &ArenaRef) -> Result<PayloadView<'_>, ArenaError> {
        let (start, end) = self.bounds(r)?;
        let bytes: &[u8] = match &self.mapping {
            Mapping::Writer { map, .. } => &map[..],
            Mapping::Reader(map) => &map[..],
        };
        Ok(PayloadView(ViewInner::Mapped(&bytes[start..end])))
    }

    fn resolve_mut(&self, r: &ArenaRef) -> Result<PayloadViewMut<'_>, ArenaError> {
        let (start, end) = self.bounds(r)?;
        let Mapping::Writer { map, slots } = &self.mapping else {
            return Err(ArenaError::ReadOnly(self.id));
        };
        if slots.lock().slot(r).is_none() {
            return Err(ArenaError::UnknownRef(*r));
        }
        // SAFETY: `r` names a live slot from this allocator, so `start..end`
        // lies inside the mapping and overlaps no other slot. Only the handle
        // holding the unpublished loan asks for a writable view of it.
        let slice = unsafe { std::slice::from_raw_parts_mut(map.as_ptr().add(start) as *mut u8, end - start) };
        Ok(PayloadViewMut(ViewMutInner::Mapped(slice)))
    }

    fn reclaim(&self, r: &ArenaRef) -> Result<(), ArenaError> {
        self.bounds(r)?;
        let Mapping::Writer { slots, .. } = &self.mapping else {
            return Err(ArenaError::ReadOnly(self.id));
        };
        let mut table = slots.lock();
        let size = table.slot(r).ok_or(ArenaError::DoubleReclaim(*r))?.size;
        table.live.remove(&r.offset);
        table.release_range(r.offset, size);
        Ok(())
    }

    fn stats(&self) -> ArenaStats {
        match &self.mapping {
            Mapping::Writer { slots, .. } => {
                let (live_slots, live_bytes, free_bytes, quarantined_bytes) = slots.lock().stats();
                ArenaStats {
                    capacity: self.capacity,
                    live_slots,
                    live_bytes,
                    free_bytes,
                    quarantined_bytes,
                    ..ArenaStats::default()
                }
            }
            Mapping::Reader(_) => ArenaStats {
                capacity: self.capacity,
                ..ArenaStats::default()
            },
        }
    }
}

/// A payload arena of either backend.
#[derive(Debug)]
pub enum Arena {
    InProc(InProcArena),
    Shm(ShmArena),
}

impl Arena {
    pub fn in_process(arena_id: u64, capacity: u64) -> Self {
        Arena::InProc(InProcArena::new(arena_id, capacity))
    }

    pub fn id(&self) -> u64 {
        match self {
            Arena::InProc(a) => a.id,
            Arena::Shm(a) => a.id,
        }
    }

    pub fn capacity(&self) -> u64 {
        match self {
            Arena::InProc(a) => a.capacity,
            Arena::Shm(a) => a.capacity,
        }
    }

    /// Reserves a slot of `length` bytes.
    pub fn allocate(&self, length: u64) -> Result<ArenaRef, ArenaError> {
        match self {
            Arena::InProc(a) => a.allocate(length),
            Arena::Shm(a) => a.allocate(length),
        }
    }

    /// Read-only view of a live slot.
    pub fn resolve(&self, r: &ArenaRef) -> Result<PayloadView<'_>, ArenaError> {
        match self {
            Arena::InProc(a) => a.resolve(r),
            Arena::Shm(a) => a.resolve(r),
        }
    }

    /// Writable view of a live slot. Callers must hold the unpublished loan.
    pub fn resolve_mut(&self, r: &ArenaRef) -> Result<PayloadViewMut<'_>, ArenaError> {
        match self {
            Arena::InProc(a) => a.resolve_mut(r),
            Arena::Shm(a) => a.resolve_mut(r),
        }
    }

    /// Frees a slot. Only refs evicted by the broker (or never-published
    /// loans) may be passed here.
    pub fn reclaim(&self, r: &ArenaRef) -> Result<(), ArenaError> {
        match self {
            Arena::InProc(a) => a.reclaim(r),
            Arena::Shm(a) => a.reclaim(r),
        }
    }

    pub fn pin(&self, r: &ArenaRef) {
        if let Arena::InProc(a) = self {
            a.pin(r)
        }
    }

    pub fn unpin(&self, r: &ArenaRef) {
        if let Arena::InProc(a) = self {
            a.unpin(r)
        }
    }

    pub fn stats(&self) -> ArenaStats {
        match self {
            Arena::InProc(a) => a.stats(),
            Arena::Shm(a) => a.stats(),
        }
    }
}

/// Maps arena ids to arenas visible in this process.
pub trait ArenaDirectory: Send + Sync {
    fn arena(&self, arena_id: u64) -> Result<Arc<Arena>, ArenaError>;
}

/// Directory that lazily maps segments read-only, plus any writer arenas
/// registered by this process.
pub struct ShmDirectory {
    root: PathBuf,
    prefix: String,
    arenas: RwLock<HashMap<u64, Arc<Arena>>>,
}

impl ShmDirectory {
    pub fn new(root: impl Into<PathBuf>, prefix: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            prefix: prefix.into(),
            arenas: RwLock::new(HashMap::new()),
        }
    }

    pub fn insert(&self, arena: Arc<Arena>) {
        self.arenas.write().insert(arena.id(), arena);
    }

    pub fn segment_path(&self, arena_id: u64) -> PathBuf {
        segment_path(&self.root, &self.prefix, arena_id)
    }
}

impl ArenaDirectory for ShmDirectory {
    fn arena(&self, arena_id: u64) -> Result<Arc<Arena>, ArenaError> {
        if let Some(a) = self.arenas.read().get(&arena_id) {
            return Ok(a.clone());
        }
        let arena = Arc::new(Arena::Shm(ShmArena::open_reader(&self.segment_path(arena_id), arena_id)?));
        Ok(self.arenas.write().entry(arena_id).or_insert(arena).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(arena_id: u64, offset: u64, length: u64) -> ArenaRef {
        ArenaRef {
            arena_id,
            offset,
            length,
        }
    }

    fn conserved(a: &Arena) {
        let s = a.stats();
        assert_eq!(s.live_bytes + s.free_bytes + s.quarantined_bytes, s.capacity, "{s:?}");
    }

    #[test]
    fn allocate_in_empty_arena() {
        let a = Arena::in_process(1, 64 * 1024);
        let slot = a.allocate(1024).unwrap();
        assert_eq!(slot, r(1, 0, 1024));
        assert_eq!(a.stats().live_slots, 1);
        conserved(&a);
    }

    #[test]
    fn allocate_beyond_capacity() {
        let a = Arena::in_process(1, 4096);
        assert!(matches!(a.allocate(4097), Err(ArenaError::ArenaExhausted { .. })));
        a.allocate(4096).unwrap();
        assert!(matches!(a.allocate(1), Err(ArenaError::ArenaExhausted { .. })));
    }

    #[test]
    fn reclaimed_slot_is_reused() {
        let a = Arena::in_process(1, 1024);
        let first = a.allocate(1024).unwrap();
        a.reclaim(&first).unwrap();
        let second = a.allocate(1024).unwrap();
        assert_eq!(first, second);
        conserved(&a);
    }

    #[test]
    fn free_runs_coalesce() {
        let a = Arena::in_process(1, 96);
        let x = a.allocate(32).unwrap();
        let y = a.allocate(32).unwrap();
        let z = a.allocate(32).unwrap();
        a.reclaim(&x).unwrap();
        a.reclaim(&z).unwrap();
        a.reclaim(&y).unwrap();
        assert_eq!(a.allocate(96).unwrap().offset, 0);
    }

    #[test]
    fn resolve_returns_written_bytes() {
        let a = Arena::in_process(3, 256);
        let slot = a.allocate(5).unwrap();
        a.resolve_mut(&slot).unwrap().copy_from_slice(b"hello");
        assert_eq!(&*a.resolve(&slot).unwrap(), b"hello");
    }

    #[test]
    fn resolve_stale_arena_id() {
        let a = Arena::in_process(3, 256);
        let slot = a.allocate(5).unwrap();
        let stale = ArenaRef { arena_id: 4, ..slot };
        assert_eq!(a.resolve(&stale).err(), Some(ArenaError::UnknownRef(stale)));
    }

    #[test]
    fn resolve_reclaimed_slot_is_poisoned() {
        let a = Arena::in_process(3, 256);
        let slot = a.allocate(16).unwrap();
        a.reclaim(&slot).unwrap();
        assert_eq!(a.resolve(&slot).err(), Some(ArenaError::PoisonedPayload(slot)));
        assert_eq!(a.stats().poisoned_observations, 1);
    }

    #[test]
    fn double_reclaim() {
        let a = Arena::in_process(3, 256);
        let slot = a.allocate(16).unwrap();
        a.reclaim(&slot).unwrap();
        assert_eq!(a.reclaim(&slot), Err(ArenaError::DoubleReclaim(slot)));
    }

    #[test]
    fn reclaim_of_pinned_slot_quarantines_it() {
        let a = Arena::in_process(3, 64);
        let slot = a.allocate(64).unwrap();
        a.pin(&slot);
        a.reclaim(&slot).unwrap();
        let s = a.stats();
        assert_eq!(s.reclaimed_while_pinned, 1);
        assert_eq!(s.quarantined_bytes, 64);
        conserved(&a);
        // the retained handle observes the violation; the slot is not reused
        assert!(matches!(a.resolve(&slot), Err(ArenaError::PoisonedPayload(_))));
        assert!(a.allocate(8).is_err());
        a.unpin(&slot);
        assert_eq!(a.stats().free_bytes, 64);
        conserved(&a);
    }

    #[test]
    fn poison_pattern_written() {
        let a = Arena::in_process(3, 64);
        let slot = a.allocate(8).unwrap();
        a.resolve_mut(&slot).unwrap().fill(7);
        a.reclaim(&slot).unwrap();
        let again = a.allocate(8).unwrap();
        assert!(a.resolve(&again).unwrap().iter().all(|&b| b == POISON_BYTE));
    }

    #[test]
    fn shm_backend_matches_inproc() {
        let dir = tempfile::tempdir().unwrap();
        let path = segment_path(dir.path(), "test", 9);
        create_segment(&path, 4096).unwrap();
        let shm = Arena::Shm(ShmArena::open_writer(&path, 9).unwrap());
        let heap = Arena::in_process(9, 4096);
        let reader = Arena::Shm(ShmArena::open_reader(&path, 9).unwrap());
        for (i, len) in [10u64, 1000, 3, 64].into_iter().enumerate() {
            let a = shm.allocate(len).unwrap();
            let b = heap.allocate(len).unwrap();
            assert_eq!(a, b);
            shm.resolve_mut(&a).unwrap().fill(i as u8 + 1);
            heap.resolve_mut(&b).unwrap().fill(i as u8 + 1);
            assert_eq!(&*reader.resolve(&a).unwrap(), &*heap.resolve(&b).unwrap());
            if i % 2 == 0 {
                shm.reclaim(&a).unwrap();
                heap.reclaim(&b).unwrap();
            }
        }
        assert_eq!(shm.stats().live_bytes, heap.stats().live_bytes);
        assert!(matches!(reader.allocate(1), Err(ArenaError::ReadOnly(9))));
    }

    proptest::proptest! {
        #[test]
        fn capacity_is_conserved(ops in proptest::collection::vec((0u8..3, 1u64..300), 1..200)) {
            let a = Arena::in_process(1, 4096);
            let mut live: Vec<ArenaRef> = Vec::new();
            for (op, len) in ops {
                match op {
                    0 | 1 => if let Ok(s) = a.allocate(len) { live.push(s) },
                    _ => if !live.is_empty() {
                        let s = live.remove(len as usize % live.len());
                        a.reclaim(&s).unwrap();
                    },
                }
                let s = a.stats();
                proptest::prop_assert_eq!(s.live_bytes + s.free_bytes, s.capacity);
                proptest::prop_assert_eq!(s.live_slots, live.len());
            }
        }
    }
}
