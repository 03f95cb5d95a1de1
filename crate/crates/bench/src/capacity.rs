//! Host capacity in delivered events per second.
//!
//! Measured with one topic and one event-driven subscriber in process. The
//! offered rate starts low and doubles each window; a window's achieved rate
//! is its publish count over the time until the subscriber has received
//! every entry of it. The ramp stops at the first window whose achieved rate
//! falls below 90 % of the offered rate, and the best achieved rate is the
//! capacity.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::Duration;

use pubsub_core::broker::BrokerConfig;
use pubsub_core::clock::monotonic_ns;
use pubsub_core::notify::NotifyError;
use pubsub_core::{Domain, Qos};

use crate::BenchError;

const START_RATE: f64 = 2_000.0;
const MAX_RATE: f64 = 4_096_000.0;
const SATURATION: f64 = 0.9;
const PROBE_DEPTH: u32 = 4096;
const PROBE_PAYLOAD: u64 = 64;

fn pace_until(target_ns: u64) {
    loop {
        let now = monotonic_ns();
        if now >= target_ns {
            return;
        }
        let left = target_ns - now;
        if left > 200_000 {
            std::thread::sleep(Duration::from_nanos(left - 100_000));
        } else {
            std::thread::yield_now();
        }
    }
}

/// Runs the saturation ramp with windows of length `window`.
pub fn probe_capacity(window: Duration) -> Result<f64, BenchError> {
    let fail = |e: &dyn std::fmt::Display| BenchError::RunFailure(format!("capacity probe: {e}"));
    let domain = Domain::with_arena_capacity(BrokerConfig::default(), (PROBE_PAYLOAD + 128) * PROBE_DEPTH as u64 * 2);
    let qos = Qos::volatile(PROBE_DEPTH);
    let sub_side = domain.spawn();
    let subscriber = sub_side.create_subscriber("capacity", qos).map_err(|e| fail(&e))?;
    let pub_side = domain.spawn();
    let publisher = pub_side.create_publisher("capacity", qos).map_err(|e| fail(&e))?;
    let received = AtomicU64::new(0);
    let stop = AtomicBool::new(false);

    std::thread::scope(|scope| -> Result<f64, BenchError> {
        let reader = scope.spawn(|| -> Result<(), BenchError> {
            while !stop.load(Ordering::Acquire) {
                match subscriber.wait(Duration::from_millis(10)) {
                    Ok(()) | Err(NotifyError::Timeout) => {}
                    Err(e) => return Err(fail(&e)),
                }
                let n = subscriber.receive().map_err(|e| fail(&e))?.len() as u64;
                received.fetch_add(n, Ordering::AcqRel);
            }
            Ok(())
        });

        let run = || -> Result<f64, BenchError> {
            let mut best: f64 = 0.0;
            let mut rate = START_RATE;
            while rate <= MAX_RATE {
                let count = (rate * window.as_secs_f64()).ceil() as u64;
                let period = (1e9 / rate) as u64;
                let before = received.load(Ordering::Acquire);
                let start = monotonic_ns();
                for k in 0..count {
                    pace_until(start + k * period);
                    publisher.loan(PROBE_PAYLOAD).and_then(|h| h.publish().map_err(Into::into)).map_err(|e| fail(&e))?;
                }
                let deadline = monotonic_ns() + 1_000_000_000;
                while received.load(Ordering::Acquire) - before < count && monotonic_ns() < deadline {
                    std::thread::yield_now();
                }
                let delivered = received.load(Ordering::Acquire) - before;
                let achieved = delivered as f64 / ((monotonic_ns() - start) as f64 / 1e9);
                best = best.max(achieved);
                log::debug!("offered {rate:.0}/s achieved {achieved:.0}/s");
                if achieved < SATURATION * rate {
                    break;
                }
                rate *= 2.0;
            }
            Ok(best)
        };
        let result = run();
        stop.store(true, Ordering::Release);
        reader.join().map_err(|_| BenchError::RunFailure("capacity reader panicked".into()))??;
        result
    })
}

/// Capacity of this host, probed once per process with 100 ms windows.
pub fn host_capacity() -> Result<f64, BenchError> {
    static CAPACITY: OnceLock<f64> = OnceLock::new();
    if let Some(c) = CAPACITY.get() {
        return Ok(*c);
    }
    let c = probe_capacity(Duration::from_millis(100))?;
    Ok(*CAPACITY.get_or_init(|| c))
}
