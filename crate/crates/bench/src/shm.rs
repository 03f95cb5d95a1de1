//! Multi-process backend: the coordinator hosts the broker server and
//! starts one actor process per endpoint.
//!
//! Actor protocol over stdio, one line each: the actor prints `ready` once
//! its endpoint is registered, reads the start instant (monotonic ns) from
//! stdin, runs, prints its [`ActorReport`] as JSON and then waits for stdin
//! to close before tearing its endpoint down.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, ValueEnum};
use pubsub_core::arena::default_shm_root;
use pubsub_core::broker::BrokerConfig;
use pubsub_core::clock::monotonic_ns;
use pubsub_core::notify::{DeliveryMode, Notifier};
use pubsub_core::proto::{connect_participant, BrokerServer, RemoteSetup};
use pubsub_core::{Broker, Pid, Qos};

use crate::config::SweepConfig;
use crate::run::{coords, publish_loop, publisher_arena_bytes, subscribe_loop, topic_name, ActorReport, IterationOutcome, RunOptions, Schedule};
use crate::BenchError;

/// Lead time between the start broadcast and the first publish.
const START_LEAD: Duration = Duration::from_millis(50);
const SUBSCRIBER_ARENA_BYTES: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Publisher,
    Subscriber,
}

#[derive(Debug, Clone, Args)]
pub struct ActorArgs {
    #[arg(long, value_enum)]
    pub role: Role,
    #[arg(long)]
    pub socket: PathBuf,
    #[arg(long)]
    pub shm_root: PathBuf,
    #[arg(long)]
    pub prefix: String,
    #[arg(long)]
    pub pid: u32,
    #[arg(long)]
    pub topic: String,
    #[arg(long)]
    pub depth: u32,
    #[arg(long)]
    pub count: u64,
    #[arg(long)]
    pub period_ns: u64,
    #[arg(long)]
    pub warmup_ns: u64,
    #[arg(long)]
    pub payload_bytes: usize,
    /// Poll interval in microseconds; event-driven when absent.
    #[arg(long)]
    pub poll_interval_us: Option<u64>,
    #[arg(long)]
    pub arena_bytes: u64,
}

fn failure(e: impl std::fmt::Display) -> BenchError {
    BenchError::RunFailure(e.to_string())
}

/// Body of an actor process.
pub fn actor_main(args: &ActorArgs) -> Result<(), BenchError> {
    let remote = connect_participant(&RemoteSetup {
        socket: args.socket.clone(),
        pid: Pid(args.pid),
        shm_root: args.shm_root.clone(),
        prefix: args.prefix.clone(),
        arena_capacity: args.arena_bytes,
    })
    .map_err(|e| BenchError::SpawnFailure(e.to_string()))?;
    let qos = Qos::volatile(args.depth);
    let spawn = |e: pubsub_core::ClientError| BenchError::SpawnFailure(e.to_string());
    let (publisher, subscriber) = match args.role {
        Role::Publisher => (Some(remote.participant.create_publisher(&args.topic, qos).map_err(spawn)?), None),
        Role::Subscriber => (None, Some(remote.participant.create_subscriber(&args.topic, qos).map_err(spawn)?)),
    };

    let mut out = std::io::stdout().lock();
    writeln!(out, "ready")?;
    out.flush()?;
    let mut stdin = std::io::stdin().lock();
    let mut line = String::new();
    stdin.read_line(&mut line)?;
    let start_ns: u64 = line.trim().parse().map_err(failure)?;
    let schedule = Schedule {
        start_ns,
        measure_from_ns: start_ns + args.warmup_ns,
        period_ns: args.period_ns,
        count: args.count,
        payload_bytes: args.payload_bytes,
    };

    let mut report = match (&publisher, &subscriber) {
        (Some(p), _) => publish_loop(p, &schedule)?,
        (_, Some(s)) => {
            let mode = match args.poll_interval_us {
                Some(us) => DeliveryMode::polling(Duration::from_micros(us)).map_err(failure)?,
                None => DeliveryMode::EventDriven,
            };
            subscribe_loop(s, &schedule, mode)?
        }
        _ => unreachable!("exactly one endpoint exists"),
    };
    if publisher.is_some() {
        report.notified = remote.notifier.stats().notified();
    }
    writeln!(out, "{}", serde_json::to_string(&report).map_err(failure)?)?;
    out.flush()?;

    while stdin.read_line(&mut line)? > 0 {}
    drop(subscriber);
    drop(publisher);
    remote.client.disconnect();
    Ok(())
}

struct Actor {
    process: u32,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl Actor {
    fn read_line(&mut self) -> Result<String, BenchError> {
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(BenchError::RunFailure(format!("actor {} exited early", self.process)));
        }
        Ok(line.trim().to_string())
    }

    fn expect_ready(&mut self) -> Result<(), BenchError> {
        match self.read_line()?.as_str() {
            "ready" => Ok(()),
            other => Err(BenchError::SpawnFailure(format!("actor {}: unexpected {other:?}", self.process))),
        }
    }
}

impl Drop for Actor {
    fn drop(&mut self) {
        self.stdin.take();
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            let deadline = monotonic_ns() + 5_000_000_000;
            while monotonic_ns() < deadline {
                if matches!(self.child.try_wait(), Ok(Some(_))) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

fn actor_exe(options: &RunOptions) -> Result<PathBuf, BenchError> {
    match &options.actor_exe {
        Some(p) => Ok(p.clone()),
        None => Ok(std::env::current_exe()?),
    }
}

/// Removes the iteration's segment directory on drop.
struct SegmentDir(PathBuf);

impl Drop for SegmentDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

pub(crate) fn run_iteration(cfg: &SweepConfig, iteration: u32, options: &RunOptions) -> Result<IterationOutcome, BenchError> {
    let exe = actor_exe(options)?;
    let sock_dir = tempfile::tempdir()?;
    let socket = sock_dir.path().join("broker.sock");
    let broker = Arc::new(Broker::new(BrokerConfig::default()));
    let server = BrokerServer::bind(&socket, broker.clone())
        .map_err(|e| BenchError::SpawnFailure(e.to_string()))?
        .spawn();
    let shm_root = default_shm_root();
    let prefix = format!("pubsub-bench-{}-{iteration}", std::process::id());
    let _segments = SegmentDir(shm_root.join(&prefix));
    let poll_us = match cfg.mode.delivery()? {
        DeliveryMode::Polling { interval } => Some(interval.as_micros() as u64),
        DeliveryMode::EventDriven => None,
    };

    let spawn = |role: Role, process: u32, topic: u32, arena_bytes: u64| -> Result<Actor, BenchError> {
        let mut cmd = Command::new(&exe);
        cmd.arg("actor")
            .args(["--role", if role == Role::Publisher { "publisher" } else { "subscriber" }])
            .arg("--socket")
            .arg(&socket)
            .arg("--shm-root")
            .arg(&shm_root)
            .args(["--prefix", &prefix])
            .args(["--pid", &(process + 1).to_string()])
            .args(["--topic", &topic_name(topic)])
            .args(["--depth", &cfg.depth.to_string()])
            .args(["--count", &cfg.publishes_per_topic().to_string()])
            .args(["--period-ns", &(cfg.period().as_nanos() as u64).to_string()])
            .args(["--warmup-ns", &(cfg.warmup.as_nanos() as u64).to_string()])
            .args(["--payload-bytes", &cfg.payload_bytes.to_string()])
            .args(["--arena-bytes", &arena_bytes.to_string()]);
        if let Some(us) = poll_us {
            cmd.args(["--poll-interval-us", &us.to_string()]);
        }
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| BenchError::SpawnFailure(format!("{}: {e}", exe.display())))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut actor = Actor {
            process,
            child,
            stdin,
            stdout,
        };
        actor.expect_ready()?;
        Ok(actor)
    };

    let mut actors = Vec::new();
    for t in 0..cfg.topics {
        for s in 0..cfg.subscribers_per_topic {
            let process = cfg.topics + t * cfg.subscribers_per_topic + s;
            actors.push(spawn(Role::Subscriber, process, t, SUBSCRIBER_ARENA_BYTES)?);
        }
    }
    for t in 0..cfg.topics {
        actors.push(spawn(Role::Publisher, t, t, publisher_arena_bytes(cfg))?);
    }

    let start = monotonic_ns() + START_LEAD.as_nanos() as u64;
    for a in &mut actors {
        let stdin = a.stdin.as_mut().expect("stdin open until teardown");
        writeln!(stdin, "{start}")?;
        stdin.flush()?;
    }
    let mut outcome = IterationOutcome::default();
    for a in &mut actors {
        let line = a.read_line()?;
        let report: ActorReport = serde_json::from_str(&line).map_err(failure)?;
        outcome.add_actor(&report, coords(cfg, iteration, a.process));
        if a.process < cfg.topics {
            outcome.notify_calls += report.notified;
        }
    }
    drop(actors);
    outcome.counters = broker.counters();
    server.stop();
    Ok(outcome)
}
