use std::path::PathBuf;
use std::time::{Duration, Instant};

use bench::report::{aggregate_rows, emit_report, read_aggregate, read_raw, RawRow};
use bench::run::{run_config_with, RunOptions};
use bench::{run_config, Backend, BenchError, Coords, LatencySample, Metric, Mode, RunResult, Sweep, SweepConfig};
use pubsub_core::broker::UpdateCounters;

const UNLIMITED: f64 = 1e12;

fn short(topics: u32, subscribers: u32) -> SweepConfig {
    let mut c = SweepConfig::new(Sweep::Custom, topics, subscribers);
    c.duration = Duration::from_millis(500);
    c.warmup = Duration::from_millis(100);
    c.iterations = 1;
    c
}

#[test]
fn one_second_at_100hz_yields_100_e2e_samples() {
    let mut c = SweepConfig::new(Sweep::Custom, 1, 1);
    c.duration = Duration::from_secs(1);
    c.warmup = Duration::ZERO;
    c.iterations = 1;
    let r = run_config(&c, UNLIMITED).unwrap();
    assert_eq!(r.publishes, 100);
    assert_eq!(r.count(Metric::E2e), 100);
    assert_eq!(r.count(Metric::Publish), 100);
    assert!(r.samples.iter().filter(|s| s.metric == Metric::E2e).all(|s| s.t_end > s.t_start));
    assert!(r.conserved());
}

#[test]
fn every_publish_notifies_every_subscriber() {
    let c = short(2, 3);
    let r = run_config(&c, UNLIMITED).unwrap();
    assert_eq!(r.publishes, 2 * c.publishes_per_topic());
    assert_eq!(r.notify_calls, r.publishes * 3);
    assert!(r.conserved(), "lost {} dup {}", r.lost_entries, r.duplicate_entries);
    assert_eq!(r.count(Metric::E2e) as u64, r.measured_publishes * 3);
}

#[test]
fn capacity_is_checked_before_any_actor_starts() {
    let c = SweepConfig::new(Sweep::Custom, 50, 16);
    let start = Instant::now();
    let err = run_config(&c, 1000.0).unwrap_err();
    assert!(matches!(err, BenchError::CapacityExceeded { required, .. } if required == 80_000.0));
    assert!(start.elapsed() < Duration::from_millis(100));
}

#[test]
fn delivery_mode_does_not_change_broker_operations() {
    let mut counters: Vec<UpdateCounters> = Vec::new();
    for mode in [Mode::Event, Mode::poll_default()] {
        let mut c = short(2, 2);
        c.mode = mode;
        let r = run_config(&c, UNLIMITED).unwrap();
        assert!(r.conserved());
        counters.push(r.counters);
    }
    assert_eq!(counters[0], counters[1]);
    assert_eq!(counters[0].publish_ops, 2 * short(2, 2).publishes_per_topic());
}

#[test]
fn report_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_config(&short(1, 2), UNLIMITED).unwrap();
    let files = emit_report(std::slice::from_ref(&r), dir.path()).unwrap();
    let raw = read_raw(&files.raw).unwrap();
    assert_eq!(raw.len(), r.samples.len());
    let recomputed = aggregate_rows(raw).unwrap();
    assert_eq!(read_aggregate(&files.aggregate).unwrap(), recomputed);
    assert_eq!(recomputed.len(), 3);
    assert!(files.heatmap.is_none());
}

fn synthetic(sweep: Sweep, topics: u32, subscribers: u32, values: &[f64]) -> RunResult {
    let config = SweepConfig::new(sweep, topics, subscribers);
    let coords = Coords {
        topics,
        subscribers,
        rate_hz: config.rate_hz,
        iteration: 0,
        process: 0,
    };
    RunResult {
        config,
        samples: values
            .iter()
            .map(|&v| LatencySample {
                metric: Metric::E2e,
                t_start: 1_000,
                t_end: 1_000 + (v * 1000.0) as u64,
                coords,
            })
            .collect(),
        publishes: values.len() as u64,
        measured_publishes: values.len() as u64,
        notify_calls: 0,
        counters: UpdateCounters::default(),
        lost_entries: 0,
        duplicate_entries: 0,
    }
}

#[test]
fn single_sample_raw_file() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&[synthetic(Sweep::A, 1, 2, &[12.5])], dir.path()).unwrap();
    let text = std::fs::read_to_string(&files.raw).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["metric,mode,backend,T,S,R,iter,process,value_us", "e2e,event,inproc,1,2,100.0,0,0,12.5"]);
    let rows = read_raw(&files.raw).unwrap();
    assert_eq!(
        rows,
        [RawRow {
            metric: "e2e".into(),
            mode: "event".into(),
            backend: "inproc".into(),
            topics: 1,
            subscribers: 2,
            rate_hz: 100.0,
            iter: 0,
            process: 0,
            value_us: 12.5,
        }]
    );
}

#[test]
fn heatmap_has_one_cell_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let results = [
        synthetic(Sweep::C, 5, 2, &[1.0, 2.0]),
        synthetic(Sweep::C, 5, 4, &[3.0]),
        synthetic(Sweep::C, 10, 2, &[4.0]),
        synthetic(Sweep::C, 10, 4, &[5.0, 6.0]),
    ];
    let files = emit_report(&results, dir.path()).unwrap();
    let heatmap: PathBuf = files.heatmap.unwrap();
    let text = std::fs::read_to_string(heatmap).unwrap();
    assert_eq!(
        text.lines().collect::<Vec<_>>(),
        ["mode,backend,T,S=2,S=4", "event,inproc,5,2,3", "event,inproc,10,4,6"]
    );
}

#[test]
fn shared_memory_backend_runs_one_process_per_endpoint() {
    let mut c = short(1, 2);
    c.backend = Backend::Shm;
    let options = RunOptions {
        actor_exe: Some(PathBuf::from(env!("CARGO_BIN_EXE_bench"))),
    };
    let r = run_config_with(&c, UNLIMITED, &options).unwrap();
    assert_eq!(r.publishes, c.publishes_per_topic());
    assert_eq!(r.notify_calls, r.publishes * 2);
    assert!(r.conserved(), "lost {} dup {}", r.lost_entries, r.duplicate_entries);
    let processes: std::collections::BTreeSet<u32> = r.samples.iter().map(|s| s.coords.process).collect();
    assert_eq!(processes.into_iter().collect::<Vec<_>>(), [0, 1, 2]);
    assert_eq!(r.counters.publish_ops, r.publishes);
    assert_eq!(r.counters.receive_bit_sets, r.publishes * 2);
}
