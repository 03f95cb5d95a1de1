//! Post-publish subscriber wakeups.
//!
//! Every subscriber owns a capacity-1 wakeup queue. A publisher sends one
//! zero-length wakeup per subscriber after each publish; if the queue is
//! already full the send returns immediately ([`NotifyOutcome::Coalesced`])
//! because the subscriber is already scheduled to wake, and its next receive
//! drains every pending entry.
//!
//! Two queue implementations exist:
//! * [`WakeupQueue`] + [`Poller`]: in-process flag and condition variable.
//! * [`MqQueue`] + [`MqPoller`]: POSIX message queue (`mq_maxmsg = 1`)
//!   waited on with epoll, for subscribers in other processes.
//!
//! Polling delivery ([`DeliveryMode::Polling`]) ignores wakeups and calls
//! receive after sleeping a fixed interval instead; see [`PollTicker`].

use std::collections::HashMap;
use std::ffi::CString;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use thiserror::Error;

use crate::types::SubscriberId;

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_micros(100);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NotifyError {
    #[error("wakeup queue is gone")]
    QueueGone,
    #[error("timed out waiting for wakeups")]
    Timeout,
    #[error("poll interval must be positive")]
    ZeroInterval,
    #[error("message queue error: {0}")]
    Os(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotifyOutcome {
    Delivered,
    Coalesced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryMode {
    EventDriven,
    Polling { interval: Duration },
}

impl DeliveryMode {
    pub fn polling(interval: Duration) -> Result<Self, NotifyError> {
        if interval.is_zero() {
            return Err(NotifyError::ZeroInterval);
        }
        Ok(DeliveryMode::Polling { interval })
    }
}

/// Readiness set shared by the queues registered with it (the epoll analog).
#[derive(Debug, Default)]
pub struct Poller {
    ready: Mutex<Vec<u64>>,
    cv: Condvar,
}

impl Poller {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Blocks until at least one registered queue is pending or `timeout`
    /// elapses. Returns the tokens of the ready queues and clears their
    /// pending flags.
    pub fn wait(&self, queues: &[&WakeupQueue], timeout: Duration) -> Result<Vec<u64>, NotifyError> {
        let deadline = Instant::now() + timeout;
        let mut ready = self.ready.lock();
        while ready.is_empty() {
            if self.cv.wait_until(&mut ready, deadline).timed_out() && ready.is_empty() {
                return Err(NotifyError::Timeout);
            }
        }
        let mut tokens = std::mem::take(&mut *ready);
        drop(ready);
        for q in queues {
            if tokens.contains(&q.token) {
                q.pending.store(false, Ordering::Release);
            }
        }
        tokens.sort_unstable();
        tokens.dedup();
        Ok(tokens)
    }
}

/// In-process capacity-1 wakeup queue.
#[derive(Debug)]
pub struct WakeupQueue {
    token: u64,
    pending: AtomicBool,
    closed: AtomicBool,
    poller: Arc<Poller>,
}

impl WakeupQueue {
    pub fn new(token: u64, poller: Arc<Poller>) -> Arc<Self> {
        Arc::new(Self {
            token,
            pending: AtomicBool::new(false),
            closed: AtomicBool::new(false),
            poller,
        })
    }

    pub fn token(&self) -> u64 {
        self.token
    }

    pub fn is_pending(&self) -> bool {
        self.pending.load(Ordering::Acquire)
    }

    /// Marks the owning subscriber as gone; later sends fail with `QueueGone`.
    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }

    /// Non-blocking send of one wakeup.
    pub fn notify(&self) -> Result<NotifyOutcome, NotifyError> {
        if self.closed.load(Ordering::Acquire) {
            return Err(NotifyError::QueueGone);
        }
        if self.pending.swap(true, Ordering::AcqRel) {
            return Ok(NotifyOutcome::Coalesced);
        }
        self.poller.ready.lock().push(self.token);
        self.poller.cv.notify_all();
        Ok(NotifyOutcome::Delivered)
    }

    /// Waits on this queue alone.
    pub fn wait(&self, timeout: Duration) -> Result<(), NotifyError> {
        self.poller.wait(&[self], timeout).map(|_| ())
    }
}

/// Subscriber-side end of a wakeup queue.
#[derive(Debug)]
pub enum SubscriberWakeup {
    InProc(Arc<WakeupQueue>),
    Mq(MqQueue),
}

impl SubscriberWakeup {
    /// Blocks until a wakeup is pending (consuming it) or `timeout` elapses.
    pub fn wait(&self, timeout: Duration) -> Result<(), NotifyError> {
        match self {
            SubscriberWakeup::InProc(q) => q.wait(timeout),
            SubscriberWakeup::Mq(q) => q.wait(timeout),
        }
    }
}

/// The wakeup path as seen by the client library.
pub trait Notifier: Send + Sync {
    /// Creates the queue for a newly registered subscriber.
    fn attach(&self, topic: &str, subscriber: SubscriberId) -> Result<SubscriberWakeup, NotifyError>;
    /// Forgets the subscriber's queue; later notifies report `QueueGone`.
    fn detach(&self, topic: &str, subscriber: SubscriberId);
    /// Non-blocking wakeup of one subscriber.
    fn notify(&self, topic: &str, subscriber: SubscriberId) -> Result<NotifyOutcome, NotifyError>;
    fn stats(&self) -> NotifyStats;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NotifyStats {
    pub delivered: u64,
    pub coalesced: u64,
    pub gone: u64,
}

impl NotifyStats {
    /// Sends that reached a live queue.
    pub fn notified(&self) -> u64 {
        self.delivered + self.coalesced
    }
}

#[derive(Debug, Default)]
struct StatCells {
    delivered: AtomicU64,
    coalesced: AtomicU64,
    gone: AtomicU64,
}

impl StatCells {
    fn record(&self, r: &Result<NotifyOutcome, NotifyError>) {
        let cell = match r {
            Ok(NotifyOutcome::Delivered) => &self.delivered,
            Ok(NotifyOutcome::Coalesced) => &self.coalesced,
            Err(_) => &self.gone,
        };
        cell.fetch_add(1, Ordering::Relaxed);
    }

    fn load(&self) -> NotifyStats {
        NotifyStats {
            delivered: self.delivered.load(Ordering::Relaxed),
            coalesced: self.coalesced.load(Ordering::Relaxed),
            gone: self.gone.load(Ordering::Relaxed),
        }
    }
}

/// Registry of in-process wakeup queues keyed by (topic, subscriber).
#[derive(Debug, Default)]
pub struct NotifyHub {
    queues: RwLock<HashMap<(String, SubscriberId), Arc<WakeupQueue>>>,
    stats: StatCells,
}

impl NotifyHub {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, topic: &str, subscriber: SubscriberId, queue: Arc<WakeupQueue>) {
        self.queues.write().insert((topic.to_owned(), subscriber), queue);
    }

    pub fn unregister(&self, topic: &str, subscriber: SubscriberId) {
        if let Some(q) = self.queues.write().remove(&(topic.to_owned(), subscriber)) {
            q.close();
        }
    }
}

impl Notifier for NotifyHub {
    fn attach(&self, topic: &str, subscriber: SubscriberId) -> Result<SubscriberWakeup, NotifyError> {
        let q = WakeupQueue::new(subscriber.0 as u64, Poller::new());
        self.register(topic, subscriber, q.clone());
        Ok(SubscriberWakeup::InProc(q))
    }

    fn detach(&self, topic: &str, subscriber: SubscriberId) {
        self.unregister(topic, subscriber);
    }

    fn notify(&self, topic: &str, subscriber: SubscriberId) -> Result<NotifyOutcome, NotifyError> {
        let q = self.queues.read().get(&(topic.to_owned(), subscriber)).cloned();
        let r = match q {
            Some(q) => q.notify(),
            None => Err(NotifyError::QueueGone),
        };
        self.stats.record(&r);
        r
    }

    fn stats(&self) -> NotifyStats {
        self.stats.load()
    }
}

/// Sleep-based tick for polling subscribers: each tick sleeps one interval
/// from the end of the previous one, so ticks drift against any external
/// schedule instead of locking to it.
#[derive(Debug)]
pub struct PollTicker {
    interval: Duration,
}

impl PollTicker {
    pub fn new(interval: Duration) -> Result<Self, NotifyError> {
        if interval.is_zero() {
            return Err(NotifyError::ZeroInterval);
        }
        Ok(Self { interval })
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    pub fn wait_tick(&mut self) {
        std::thread::sleep(self.interval);
    }
}

/// One step of a polling subscriber loop: wait for the tick, then receive.
pub fn poll_loop_step<R>(ticker: &mut PollTicker, receive: impl FnOnce() -> R) -> R {
    ticker.wait_tick();
    receive()
}

/// Stable 64-bit FNV-1a hash of a topic name, used in queue names.
pub fn topic_hash(topic: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in topic.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// POSIX queue name for a subscriber. Queue names allow a single leading
/// slash only, so the `<prefix>/<topic-hash>/<id>` components are joined
/// with dots.
pub fn mq_name(prefix: &str, topic: &str, subscriber: SubscriberId) -> String {
    format!("/{}.{:016x}.{}", prefix, topic_hash(topic), subscriber.0)
}

fn os_err(ctx: &str) -> NotifyError {
    NotifyError::Os(format!("{ctx}: {}", std::io::Error::last_os_error()))
}

/// Capacity-1 POSIX message queue used as a cross-process wakeup.
#[derive(Debug)]
pub struct MqQueue {
    name: String,
    mqd: libc::mqd_t,
    owner: bool,
}

// SAFETY: an mqd_t is a file descriptor; the kernel serializes operations.
unsafe impl Send for MqQueue {}
unsafe impl Sync for MqQueue {}

impl MqQueue {
    /// Creates the queue on the subscriber side. An existing queue with the
    /// same name (left by a crashed process) is replaced.
    pub fn create(name: &str) -> Result<Self, NotifyError> {
        let cname = CString::new(name).map_err(|e| NotifyError::Os(e.to_string()))?;
        // SAFETY: valid C string; unlink of a missing queue is harmless.
        unsafe { libc::mq_unlink(cname.as_ptr()) };
        let mut attr: libc::mq_attr = unsafe { std::mem::zeroed() };
        attr.mq_maxmsg = 1;
        attr.mq_msgsize = 1;
        // SAFETY: valid name and attribute pointers.
        let mqd = unsafe {
            libc::mq_open(
                cname.as_ptr(),
                libc::O_CREAT | libc::O_RDWR | libc::O_NONBLOCK | libc::O_CLOEXEC,
                0o600 as libc::mode_t,
                &attr as *const libc::mq_attr,
            )
        };
        if mqd == -1 {
            return Err(os_err("mq_open"));
        }
        Ok(Self {
            name: name.to_owned(),
            mqd,
            owner: true,
        })
    }

    /// Opens an existing queue for sending. Fails with `QueueGone` if the
    /// subscriber has not created it or has exited.
    pub fn open_sender(name: &str) -> Result<Self, NotifyError> {
        let cname = CString::new(name).map_err(|e| NotifyError::Os(e.to_string()))?;
        // SAFETY: valid C string.
        let mqd = unsafe { libc::mq_open(cname.as_ptr(), libc::O_WRONLY | libc::O_NONBLOCK | libc::O_CLOEXEC) };
        if mqd == -1 {
            return Err(NotifyError::QueueGone);
        }
        Ok(Self {
            name: name.to_owned(),
            mqd,
            owner: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Non-blocking zero-length send.
    pub fn notify(&self) -> Result<NotifyOutcome, NotifyError> {
        // SAFETY: zero-length message from a valid pointer.
        let r = unsafe { libc::mq_send(self.mqd, [0u8].as_ptr() as *const libc::c_char, 0, 0) };
        if r == 0 {
            return Ok(NotifyOutcome::Delivered);
        }
        match std::io::Error::last_os_error().raw_os_error() {
            Some(libc::EAGAIN) => Ok(NotifyOutcome::Coalesced),
            Some(libc::EBADF) => Err(NotifyError::QueueGone),
            _ => Err(os_err("mq_send")),
        }
    }

    /// Empties the queue; returns whether a wakeup was pending.
    pub fn drain(&self) -> bool {
        let mut buf = [0u8; 8];
        let mut any = false;
        loop {
            // SAFETY: buffer is larger than mq_msgsize.
            let r = unsafe {
                libc::mq_receive(self.mqd, buf.as_mut_ptr() as *mut libc::c_char, buf.len(), std::ptr::null_mut())
            };
            if r < 0 {
                return any;
            }
            any = true;
        }
    }

    /// Waits until a wakeup is pending, then drains it.
    pub fn wait(&self, timeout: Duration) -> Result<(), NotifyError> {
        if self.drain() {
            return Ok(());
        }
        let mut pfd = libc::pollfd {
            fd: self.mqd,
            events: libc::POLLIN,
            revents: 0,
        };
        let ts = libc::timespec {
            tv_sec: timeout.as_secs() as libc::time_t,
            tv_nsec: timeout.subsec_nanos() as libc::c_long,
        };
        // SAFETY: one valid pollfd; null sigmask.
        let r = unsafe { libc::ppoll(&mut pfd, 1, &ts, std::ptr::null()) };
        if r < 0 {
            return Err(os_err("ppoll"));
        }
        if r == 0 || !self.drain() {
            return Err(NotifyError::Timeout);
        }
        Ok(())
    }

    pub fn unlink(name: &str) {
        if let Ok(cname) = CString::new(name) {
            // SAFETY: valid C string.
            unsafe { libc::mq_unlink(cname.as_ptr()) };
        }
    }
}

impl Drop for MqQueue {
    fn drop(&mut self) {
        // SAFETY: descriptor owned by this value.
        unsafe { libc::mq_close(self.mqd) };
        if self.owner {
            Self::unlink(&self.name);
        }
    }
}

/// epoll set over several [`MqQueue`]s.
#[derive(Debug)]
pub struct MqPoller {
    epfd: libc::c_int,
}

impl MqPoller {
    pub fn new() -> Result<Self, NotifyError> {
        // SAFETY: plain syscall.
        let epfd = unsafe { libc::epoll_create1(libc::EPOLL_CLOEXEC) };
        if epfd < 0 {
            return Err(os_err("epoll_create1"));
        }
        Ok(Self { epfd })
    }

    pub fn add(&self, queue: &MqQueue, token: u64) -> Result<(), NotifyError> {
        let mut ev = libc::epoll_event {
            events: libc::EPOLLIN as u32,
            u64: token,
        };
        // SAFETY: valid epoll fd, queue fd and event pointer.
        if unsafe { libc::epoll_ctl(self.epfd, libc::EPOLL_CTL_ADD, queue.mqd, &mut ev) } < 0 {
            return Err(os_err("epoll_ctl"));
        }
        Ok(())
    }

    /// Returns tokens of ready queues. Callers drain the matching queues.
    pub fn wait(&self, timeout: Duration) -> Result<Vec<u64>, NotifyError> {
        let mut events = [libc::epoll_event { events: 0, u64: 0 }; 64];
        let ms = timeout.as_millis().min(i32::MAX as u128) as i32;
        // SAFETY: buffer of 64 events.
        let n = unsafe { libc::epoll_wait(self.epfd, events.as_mut_ptr(), events.len() as i32, ms) };
        if n < 0 {
            return Err(os_err("epoll_wait"));
        }
        if n == 0 {
            return Err(NotifyError::Timeout);
        }
        let mut tokens: Vec<u64> = events[..n as usize].iter().map(|e| e.u64).collect();
        tokens.sort_unstable();
        Ok(tokens)
    }
}

impl Drop for MqPoller {
    fn drop(&mut self) {
        // SAFETY: fd owned by this value.
        unsafe { libc::close(self.epfd) };
    }
}

/// Publisher-side notifier that opens subscriber queues by name.
pub struct MqNotifier {
    prefix: String,
    senders: Mutex<HashMap<(String, SubscriberId), Arc<MqQueue>>>,
    stats: StatCells,
}

impl MqNotifier {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            senders: Mutex::new(HashMap::new()),
            stats: StatCells::default(),
        }
    }

    fn sender(&self, topic: &str, subscriber: SubscriberId) -> Result<Arc<MqQueue>, NotifyError> {
        let key = (topic.to_owned(), subscriber);
        if let Some(q) = self.senders.lock().get(&key) {
            return Ok(q.clone());
        }
        let q = Arc::new(MqQueue::open_sender(&mq_name(&self.prefix, topic, subscriber))?);
        self.senders.lock().insert(key, q.clone());
        Ok(q)
    }
}

impl Notifier for MqNotifier {
    fn attach(&self, topic: &str, subscriber: SubscriberId) -> Result<SubscriberWakeup, NotifyError> {
        MqQueue::create(&mq_name(&self.prefix, topic, subscriber)).map(SubscriberWakeup::Mq)
    }

    fn detach(&self, topic: &str, subscriber: SubscriberId) {
        self.senders.lock().remove(&(topic.to_owned(), subscriber));
    }

    fn notify(&self, topic: &str, subscriber: SubscriberId) -> Result<NotifyOutcome, NotifyError> {
        let r = self.sender(topic, subscriber).and_then(|q| q.notify());
        if r.is_err() {
            self.senders.lock().remove(&(topic.to_owned(), subscriber));
        }
        self.stats.record(&r);
        r
    }

    fn stats(&self) -> NotifyStats {
        self.stats.load()
    }
}
