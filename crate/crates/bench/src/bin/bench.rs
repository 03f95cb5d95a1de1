use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use bench::capacity::host_capacity;
use bench::config::{sweep_configs, Backend, Mode, Sweep, SweepConfig};
use bench::report::{aggregate, emit_report};
use bench::shm::{actor_main, ActorArgs};
use bench::{run_config, scaling_fit, Axis, BenchError, Metric};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Event,
    Poll,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Inproc,
    Shm,
}

/// Latency sweeps over topic count and subscriber fan-out.
#[derive(Parser, Debug)]
#[command(name = "bench", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[arg(long, value_enum, default_value = "a")]
    sweep: SweepArg,
    #[arg(long, value_enum, default_value = "event")]
    mode: ModeArg,
    #[arg(long, default_value_t = 100)]
    poll_interval_us: u64,
    #[arg(long, value_enum, default_value = "inproc")]
    backend: BackendArg,
    #[arg(long, default_value_t = 100.0)]
    rate_hz: f64,
    #[arg(long, default_value_t = 3.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 1.0)]
    warmup_s: f64,
    #[arg(long, default_value_t = 3)]
    iterations: u32,
    /// Use the larger sweep points.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value = "bench-out")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Runs one endpoint of a shared-memory iteration.
    #[command(hide = true)]
    Actor(ActorArgs),
}

fn sweeps(cli: &Cli) -> Result<Vec<SweepConfig>, BenchError> {
    let sweep = match cli.sweep {
        SweepArg::A => Sweep::A,
        SweepArg::B => Sweep::B,
        SweepArg::C => Sweep::C,
    };
    let seconds = |s: f64| {
        Duration::try_from_secs_f64(s).map_err(|_| BenchError::InvalidConfig(format!("bad duration {s}")))
    };
    let mut template = SweepConfig::new(sweep, 1, 1);
    template.rate_hz = cli.rate_hz;
    template.duration = seconds(cli.duration_s)?;
    template.warmup = seconds(cli.warmup_s)?;
    template.iterations = cli.iterations;
    template.mode = match cli.mode {
        ModeArg::Event => Mode::Event,
        ModeArg::Poll => Mode::Poll {
            interval: Duration::from_micros(cli.poll_interval_us),
        },
    };
    template.backend = match cli.backend {
        BackendArg::Inproc => Backend::InProc,
        BackendArg::Shm => Backend::Shm,
    };
    let configs = sweep_configs(sweep, cli.paper_scale, &template);
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

fn run(cli: &Cli) -> Result<(), BenchError> {
    let configs = sweeps(cli)?;
    let capacity = host_capacity()?;
    log::info!("host capacity {capacity:.0} events/s");
    for c in &configs {
        c.check_capacity(capacity)?;
    }
    let mut results = Vec::new();
    for c in &configs {
        log::info!("T={} S={} R={}", c.topics, c.subscribers_per_topic, c.rate_hz);
        let r = run_config(c, capacity)?;
        if !r.conserved() {
            log::warn!(
                "T={} S={}: {} lost, {} duplicate entries",
                c.topics,
                c.subscribers_per_topic,
                r.lost_entries,
                r.duplicate_entries
            );
        }
        results.push(r);
    }
    let files = emit_report(&results, &cli.out_dir)?;
    let rows = aggregate(&results)?;
    println!("metric   T    S    n        p50_us     p999_us");
    for a in &rows {
        println!(
            "{:<8} {:<4} {:<4} {:<8} {:<10.2} {:.2}",
            a.metric.label(),
            a.topics,
            a.subscribers,
            a.report.n,
            a.report.p50,
            a.report.p999
        );
    }
    let axis = match cli.sweep {
        SweepArg::A => Some(Axis::Topics),
        SweepArg::B => Some(Axis::Subscribers),
        SweepArg::C => None,
    };
    if let Some(axis) = axis {
        for metric in Metric::ALL {
            let of_metric: Vec<_> = rows.iter().filter(|a| a.metric == metric).cloned().collect();
            match scaling_fit(&of_metric, axis) {
                Ok(fit) => println!(
                    "{} p50 fit: slope {:.3} us/step, r2 {:.3}",
                    metric.label(),
                    fit.slope,
                    fit.r2
                ),
                Err(e) => println!("{} p50 fit: {e}", metric.label()),
            }
        }
    }
    println!("wrote {}", files.raw.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Some(Command::Actor(args)) => actor_main(args),
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::FAILURE
        }
    }
}
