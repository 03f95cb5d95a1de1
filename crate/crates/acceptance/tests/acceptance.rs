//! The twelve end-to-end acceptance criteria, one pass/fail line each.
//!
//! Runs with its own harness: `cargo test -p pubsub-acceptance --test
//! acceptance [FILTER]` runs the criteria whose slug contains FILTER.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use bench::capacity::host_capacity;
use bench::config::{sweep_configs, Mode, Sweep, SweepConfig};
use bench::report::aggregate;
use bench::{percentile, run_config, scaling_fit, Axis, Metric, PercentileReport};
use pubsub_acceptance::stress::{run_stress, StressConfig};
use pubsub_acceptance::wire;
use pubsub_core::broker::{Broker, BrokerConfig, LockAcquisition, LockMode, OpClass, UpdateCounters};
use pubsub_core::{Domain, EntryId, Qos};
use pubsub_refsim::workload::{apply_broker, apply_sim, diff_state, generate, WorkloadShape};
use pubsub_refsim::RefSim;
use racelab::scenario::{crash_join, CacheRefresh};
use racelab::{explore, Architecture, Bound, ViolationKind};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn delta(after: UpdateCounters, before: UpdateCounters) -> UpdateCounters {
    UpdateCounters {
        publish_ops: after.publish_ops - before.publish_ops,
        receive_bit_sets: after.receive_bit_sets - before.receive_bit_sets,
        release_bit_clears: after.release_bit_clears - before.release_bit_clears,
        membership_ops: after.membership_ops - before.membership_ops,
    }
}

fn update_frequency() -> Verdict {
    let start = Instant::now();
    for s in [1u64, 2, 4, 8] {
        for k in [0usize, 1, 10, 100] {
            let d = Domain::new(BrokerConfig::default());
            let p = d.spawn();
            let publisher = p.create_publisher("t", Qos::volatile(1)).map_err(|e| e.to_string())?;
            let procs: Vec<_> = (0..s).map(|_| d.spawn()).collect();
            let subs = procs
                .iter()
                .map(|q| q.create_subscriber("t", Qos::volatile(1)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            let before = d.broker().counters();
            publisher.loan_with(b"m").and_then(|h| Ok(h.publish()?)).map_err(|e| e.to_string())?;
            for sub in &subs {
                let h = sub.receive().map_err(|e| e.to_string())?.pop().ok_or("nothing received")?;
                let clones = (0..k).map(|_| h.try_clone()).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
                drop(h);
                drop(clones);
            }
            let updates = delta(d.broker().counters(), before).message_updates();
            if updates != 1 + 2 * s {
                return Err(format!("S={s} k={k}: {updates} updates, expected {}", 1 + 2 * s));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(5),
        format!("updates per message = 1 + 2S in all 16 cells, {elapsed:.2?}"),
    )
}

fn stress_safety_and_liveness() -> (Verdict, Verdict) {
    let r = match run_stress(StressConfig::default()) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let safety = check(
        r.poisoned_reads == 0 && r.corrupt_reads == 0 && r.published == 100_000 && r.elapsed < Duration::from_secs(60),
        format!(
            "{} published, {} received, {} reads, {} poisoned, {} corrupt, {} crashes, {} endpoints, {:.2?}",
            r.published,
            r.received,
            r.payload_reads,
            r.poisoned_reads,
            r.corrupt_reads,
            r.crashes,
            r.endpoints,
            r.elapsed
        ),
    );
    let liveness = check(
        r.quiescent.live_slots == r.expected_live_slots && r.quiescent.reclaimed_while_pinned == 0,
        format!(
            "live slots {} after quiescence, expected {}; {} reclaimed while pinned",
            r.quiescent.live_slots, r.expected_live_slots, r.quiescent.reclaimed_while_pinned
        ),
    );
    (safety, liveness)
}

fn eviction_oracle() -> Verdict {
    let start = Instant::now();
    let mut steps = 0usize;
    for seed in 0..10_000u64 {
        let shape = WorkloadShape {
            max_messages: 200,
            max_depth: 1 + (seed % 5) as u32,
            ..WorkloadShape::default()
        };
        let ops = generate(seed, shape);
        let broker = Broker::default();
        let mut sim = RefSim::new(64);
        for (step, op) in ops.iter().enumerate() {
            let got = apply_broker(&broker, op);
            let want = apply_sim(&mut sim, op);
            if got != want {
                return Err(format!("seed {seed} step {step} {op:?}: broker {got:?}, reference {want:?}"));
            }
            let snapshot = broker.snapshot(None).map_err(|e| e.to_string())?;
            if let Some(d) = diff_state(&snapshot, &sim) {
                return Err(format!("seed {seed} step {step} {op:?}: {d}"));
            }
        }
        steps += ops.len();
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(120),
        format!("10000 sequences, {steps} steps identical, {elapsed:.2?}"),
    )
}

fn late_joiner_grid() -> Verdict {
    let mut cases = 0;
    for p in [1u32, 3, 5] {
        for d in [1u32, 3, 5] {
            for n in 0u64..=7 {
                let dom = Domain::new(BrokerConfig::default());
                let (a, b) = (dom.spawn(), dom.spawn());
                let publisher = a.create_publisher("t", Qos::transient_local(p)).map_err(|e| e.to_string())?;
                for i in 0..n {
                    publisher.loan_with(&i.to_le_bytes()).and_then(|h| Ok(h.publish()?)).map_err(|e| e.to_string())?;
                }
                let sub = b.create_subscriber("t", Qos::transient_local(d)).map_err(|e| e.to_string())?;
                let got: Vec<EntryId> = sub
                    .receive()
                    .map_err(|e| e.to_string())?
                    .iter()
                    .filter_map(|h| h.entry_id())
                    .collect();
                let k = (d as u64).min(n.min(p as u64));
                let want: Vec<EntryId> = (n - k + 1..=n).map(EntryId).collect();
                if got != want {
                    return Err(format!("p={p} d={d} n={n}: got {got:?}, expected {want:?}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (p, d, n) cases deliver the newest min(d, n, p) entries in order"))
}

fn racelab_reproduction() -> Verdict {
    let start = Instant::now();
    let family = [
        crash_join(1, CacheRefresh::Late),
        crash_join(1, CacheRefresh::Early),
        crash_join(2, CacheRefresh::Late),
        crash_join(2, CacheRefresh::Early),
    ];
    let bound = Bound::default();
    let owner = explore(&family[0], Architecture::OwnerDriven, bound).map_err(|e| e.to_string())?;
    let again = explore(&family[0], Architecture::OwnerDriven, bound).map_err(|e| e.to_string())?;
    let r1 = owner.count(ViolationKind::PrematureReclaim);
    let shortest = owner.violations.iter().map(|v| v.steps.len()).min().unwrap_or(0);
    let mut single_states = 0;
    let mut single_violations = 0;
    for s in &family {
        let e = explore(s, Architecture::SingleWriter, bound).map_err(|e| e.to_string())?;
        single_states += e.states_visited;
        single_violations += e.violating_states;
    }
    let elapsed = start.elapsed();
    check(
        r1 >= 1 && shortest <= bound.max_depth && owner == again && single_violations == 0 && elapsed < Duration::from_secs(60),
        format!(
            "owner-driven: {r1} premature reclaims (shortest {shortest} steps, {} states); single-writer: {single_violations} violations over {single_states} states; {elapsed:.2?}",
            owner.states_visited
        ),
    )
}

fn lock_modes() -> Verdict {
    let d = Domain::new(BrokerConfig {
        record_lock_modes: true,
        ..BrokerConfig::default()
    });
    let (a, b) = (d.spawn(), d.spawn());
    let publisher = a.create_publisher("t", Qos::volatile(2)).map_err(|e| e.to_string())?;
    let sub = b.create_subscriber("t", Qos::volatile(2)).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        publisher.loan_with(b"x").and_then(|h| Ok(h.publish()?)).map_err(|e| e.to_string())?;
        drop(sub.receive().map_err(|e| e.to_string())?);
    }
    drop(sub);
    drop(publisher);
    let log = d.broker().lock_acquisitions();
    let seen: BTreeSet<LockAcquisition> = log.keys().copied().collect();
    let want: BTreeSet<LockAcquisition> = [
        (OpClass::Publish, LockMode::Read, Some(LockMode::Write)),
        (OpClass::Receive, LockMode::Read, Some(LockMode::Read)),
        (OpClass::Release, LockMode::Read, Some(LockMode::Read)),
        (OpClass::Membership, LockMode::Write, None),
    ]
    .into_iter()
    .map(|(op, global, topic)| LockAcquisition { op, global, topic })
    .collect();
    check(seen == want, format!("observed {log:?}"))
}

/// Barrier whose waiters give up after a timeout instead of hanging when
/// fewer parties can arrive.
struct TimedBarrier {
    arrived: Mutex<usize>,
    cv: Condvar,
    parties: usize,
}

impl TimedBarrier {
    fn wait(&self, timeout: Duration) -> bool {
        let mut n = self.arrived.lock();
        *n += 1;
        self.cv.notify_all();
        let deadline = Instant::now() + timeout;
        while *n < self.parties {
            if self.cv.wait_until(&mut n, deadline).timed_out() {
                return *n >= self.parties;
            }
        }
        true
    }
}

fn receive_concurrency() -> Verdict {
    const S: usize = 8;
    let in_flight = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let barrier = Arc::new(TimedBarrier {
        arrived: Mutex::new(0),
        cv: Condvar::new(),
        parties: S,
    });
    let probe = {
        let (in_flight, peak, barrier) = (in_flight.clone(), peak.clone(), barrier.clone());
        Arc::new(move |_: &str, _| {
            let now = in_flight.fetch_add(1, Ordering::AcqRel) + 1;
            peak.fetch_max(now, Ordering::AcqRel);
            barrier.wait(Duration::from_secs(5));
            in_flight.fetch_sub(1, Ordering::AcqRel);
        })
    };
    let d = Domain::new(BrokerConfig {
        receive_probe: Some(probe),
        ..BrokerConfig::default()
    });
    let p = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).map_err(|e| e.to_string())?;
    let procs: Vec<_> = (0..S).map(|_| d.spawn()).collect();
    let subs = procs
        .iter()
        .map(|q| q.create_subscriber("t", Qos::volatile(1)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    publisher.loan_with(b"x").and_then(|h| Ok(h.publish()?)).map_err(|e| e.to_string())?;
    let received: usize = std::thread::scope(|scope| {
        let joins: Vec<_> = subs.iter().map(|s| scope.spawn(move || s.receive().map(|v| v.len()).unwrap_or(0))).collect();
        joins.into_iter().map(|j| j.join().unwrap_or(0)).sum()
    });
    let peak = peak.load(Ordering::Acquire);
    check(peak == S && received == S, format!("peak in-flight receives {peak}, {received} deliveries"))
}

fn bench_config(topics: u32, subscribers: u32, mode: Mode) -> SweepConfig {
    let mut c = SweepConfig::new(Sweep::Custom, topics, subscribers);
    c.duration = Duration::from_secs(2);
    c.warmup = Duration::from_millis(500);
    c.iterations = 1;
    c.mode = mode;
    c
}

fn p50(values: &[f64]) -> Result<f64, String> {
    percentile(values, 0.5).map_err(|e| e.to_string())
}

fn scaling_shape() -> Verdict {
    for s in 1..=16usize {
        let d = Domain::new(BrokerConfig::default());
        let p = d.spawn();
        let publisher = p.create_publisher("t", Qos::volatile(4)).map_err(|e| e.to_string())?;
        let procs: Vec<_> = (0..s).map(|_| d.spawn()).collect();
        let subs = procs
            .iter()
            .map(|q| q.create_subscriber("t", Qos::volatile(4)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let before = d.notify_stats().notified();
            let receipt = publisher.loan_with(b"x").and_then(|h| Ok(h.publish()?)).map_err(|e| e.to_string())?;
            let sent = d.notify_stats().notified() - before;
            if receipt.notified_subscriber_count != s || sent != s as u64 {
                return Err(format!("S={s}: receipt {}, notifier {sent}", receipt.notified_subscriber_count));
            }
            for sub in &subs {
                drop(sub.receive().map_err(|e| e.to_string())?);
            }
        }
    }

    let capacity = host_capacity().map_err(|e| e.to_string())?;
    let template = bench_config(1, 1, Mode::Event);
    let mut results = Vec::new();
    for c in sweep_configs(Sweep::B, false, &template) {
        results.push(run_config(&c, capacity).map_err(|e| e.to_string())?);
    }
    let rows = aggregate(&results).map_err(|e| e.to_string())?;
    let publish_rows: Vec<_> = rows.iter().filter(|a| a.metric == Metric::Publish).cloned().collect();
    let fit = scaling_fit(&publish_rows, Axis::Subscribers).map_err(|e| e.to_string())?;
    let series: Vec<String> = publish_rows.iter().map(|a| format!("S={}:{:.1}", a.subscribers, a.report.p50)).collect();

    let one = run_config(&bench_config(1, 2, Mode::Event), capacity).map_err(|e| e.to_string())?;
    let many = run_config(&bench_config(25, 2, Mode::Event), capacity).map_err(|e| e.to_string())?;
    let (r1, r25) = (p50(&one.values(Metric::Receive))?, p50(&many.values(Metric::Receive))?);
    check(
        fit.r2 >= 0.9 && fit.slope > 0.0 && r25 <= 2.0 * r1,
        format!(
            "notify count = S for S in 1..=16; publish p50 [{}] us, slope {:.3}, r2 {:.3}; receive p50 T=1 {r1:.2} us, T=25 {r25:.2} us",
            series.join(" "),
            fit.slope,
            fit.r2
        ),
    )
}

fn polling_floor() -> Verdict {
    let capacity = host_capacity().map_err(|e| e.to_string())?;
    let mut event = bench_config(1, 1, Mode::Event);
    event.duration = Duration::from_secs(3);
    event.warmup = Duration::from_secs(1);
    let poll = SweepConfig {
        mode: Mode::Poll {
            interval: Duration::from_micros(100),
        },
        ..event.clone()
    };
    let e = run_config(&event, capacity).map_err(|e| e.to_string())?;
    let p = run_config(&poll, capacity).map_err(|e| e.to_string())?;
    let (ev, pv) = (p50(&e.values(Metric::E2e))?, p50(&p.values(Metric::E2e))?);
    check(
        pv >= 25.0 && pv >= 2.0 * ev,
        format!("E2E p50 polling {pv:.1} us, event-driven {ev:.1} us, ratio {:.2}", pv / ev),
    )
}

fn percentile_correctness() -> Verdict {
    let seq = |n: u32| (1..=n).map(f64::from).collect::<Vec<f64>>();
    let cases = [
        (PercentileReport::pooled(&seq(100)), PercentileReport { p50: 50.0, p999: 100.0, n: 100 }),
        (PercentileReport::pooled(&seq(1000)), PercentileReport { p50: 500.0, p999: 999.0, n: 1000 }),
        (PercentileReport::pooled(&seq(2000)), PercentileReport { p50: 1000.0, p999: 1998.0, n: 2000 }),
        (PercentileReport::pooled(&[4.0, 1.0, 3.0, 2.0]), PercentileReport { p50: 2.0, p999: 4.0, n: 4 }),
        (PercentileReport::pooled(&[7.0]), PercentileReport { p50: 7.0, p999: 7.0, n: 1 }),
    ];
    for (got, want) in &cases {
        if got.as_ref().ok() != Some(want) {
            return Err(format!("got {got:?}, expected {want:?}"));
        }
    }
    let a = [1.0, 1.0, 1.0];
    let b = [100.0, 100.0, 100.0];
    let pooled = p50(&[a, b].concat())?;
    let averaged = (p50(&a)? + p50(&b)?) / 2.0;
    check(
        pooled == 1.0 && averaged == 50.5,
        format!("{} oracle cases exact; pooled p50 {pooled} vs per-stream average {averaged}", cases.len()),
    )
}

fn proto_transparency() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut steps = 0;
    for seed in 0..1_000u64 {
        let shape = WorkloadShape {
            max_messages: 1 + (seed % 200) as usize,
            max_depth: 1 + (seed % 5) as u32,
            ..WorkloadShape::default()
        };
        let ops = generate(seed, shape);
        let socket = dir.path().join(format!("{seed}.sock"));
        steps += wire::compare(&ops, &socket).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(format!("1000 sequences, {steps} steps byte-identical, {:.2?}", start.elapsed()))
}

fn record(verdicts: &mut Vec<Verdict>, n: u32, slug: &str, v: Verdict) {
    match &v {
        Ok(detail) => println!("criterion {n:>2} {slug}: PASS ({detail})"),
        Err(detail) => println!("criterion {n:>2} {slug}: FAIL ({detail})"),
    }
    verdicts.push(v);
}

fn guarded(f: &dyn Fn() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()))
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let selected = |slug: &str| filter.as_deref().map_or(true, |f| slug.contains(f));
    let mut verdicts = Vec::new();
    if selected("update-frequency") {
        record(&mut verdicts, 1, "update-frequency", guarded(&update_frequency));
    }
    if selected("stress-safety") || selected("stress-liveness") {
        let (safety, liveness) = catch_unwind(stress_safety_and_liveness)
            .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
        record(&mut verdicts, 2, "stress-safety", safety);
        record(&mut verdicts, 3, "stress-liveness", liveness);
    }
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (4, "eviction-oracle", eviction_oracle),
        (5, "late-joiner", late_joiner_grid),
        (6, "racelab", racelab_reproduction),
        (7, "lock-modes", lock_modes),
        (8, "receive-concurrency", receive_concurrency),
        (9, "scaling-shape", scaling_shape),
        (10, "polling-floor", polling_floor),
        (11, "percentiles", percentile_correctness),
        (12, "proto-transparency", proto_transparency),
    ];
    for (n, slug, f) in criteria {
        if selected(slug) {
            record(&mut verdicts, n, slug, guarded(&f));
        }
    }

    let failed = verdicts.iter().filter(|v| v.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
