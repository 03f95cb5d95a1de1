//! Monotonic timestamps shared across processes on one host.

/// `CLOCK_MONOTONIC` in nanoseconds. Unlike `Instant`, the raw value can be
/// written into a payload and compared in another process.
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: valid timespec pointer; CLOCK_MONOTONIC is always available.
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}
