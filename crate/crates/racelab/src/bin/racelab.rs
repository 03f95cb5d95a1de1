use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use racelab::{explore, scenario, Architecture, Bound, RaceError, Scenario};

/// Explore interleavings of a reclamation scenario and report R1/R2 violations.
#[derive(Parser, Debug)]
#[command(name = "racelab", version)]
struct Args {
    /// single-writer or owner-driven
    #[arg(long, required_unless_present = "list")]
    arch: Option<Architecture>,
    /// Built-in scenario name or path to a scenario JSON file.
    #[arg(long, default_value = "crash-join")]
    scenario: String,
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
    #[arg(long, default_value_t = 1_000_000)]
    max_states: usize,
    /// Where to write the exploration report with violation traces.
    #[arg(long)]
    out: Option<PathBuf>,
    /// List the built-in scenarios and exit.
    #[arg(long)]
    list: bool,
}

fn load(name: &str) -> Result<Scenario, RaceError> {
    let path = std::path::Path::new(name);
    if path.exists() {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    } else {
        scenario::named(name)
    }
}

fn run(args: Args) -> Result<usize, RaceError> {
    if args.list {
        for s in scenario::catalogue() {
            println!("{}", s.name);
        }
        return Ok(0);
    }
    let arch = args.arch.expect("clap requires --arch without --list");
    let scenario = load(&args.scenario)?;
    let bound = Bound {
        max_depth: args.max_depth,
        max_states: args.max_states,
        ..Bound::default()
    };
    let result = explore(&scenario, arch, bound)?;
    println!(
        "{} on {}: {} states, {} violating states, {} minimal violations",
        arch,
        scenario.name,
        result.states_visited,
        result.violating_states,
        result.violations.len()
    );
    for v in &result.violations {
        println!("  {:?} after {} steps (messages {:#b})", v.kind, v.steps.len(), v.messages);
        for s in &v.steps {
            println!("    actor {} op {} {:?} {:?}", s.actor, s.op_index, s.op, s.micro);
        }
    }
    if let Some(out) = args.out {
        std::fs::write(out, serde_json::to_string_pretty(&result)?)?;
    }
    Ok(result.violations.len())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("racelab: {e}");
            ExitCode::from(2)
        }
    }
}
