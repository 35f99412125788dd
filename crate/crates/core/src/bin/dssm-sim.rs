use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dssm::metrics::{export_metrics, MetricsFormat};
use dssm::scenario::{compare_static_dynamic, load_scenario, run_scenario, Mode, ScenarioError};
use dssm::simnet::trace_to_csv;

#[derive(Parser)]
#[command(name = "dssm-sim", version, about = "Two-tier storage management protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes the event trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Writes metrics; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Also runs the scenario with pinned agents and prints both rows.
        #[arg(long)]
        compare_static: bool,
    },
}

fn run(
    path: PathBuf,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    metrics: Option<PathBuf>,
    compare: bool,
) -> Result<(), ScenarioError> {
    let mut scenario = load_scenario(&path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let out = run_scenario(&scenario)?;
    if let Some(p) = trace {
        fs::write(&p, trace_to_csv(&out.trace))?;
    }
    if let Some(p) = metrics {
        export_metrics(&out.metrics, MetricsFormat::from_path(&p), &p)?;
    }
    let s = out.summary(Mode::Dynamic);
    println!(
        "scenario {} seed {}: {} events traced, {} metrics, {} assertions passed, end at {} ms",
        scenario.name,
        scenario.seed,
        out.trace.len(),
        out.metrics.len(),
        out.assertions_checked,
        out.end_time_ms
    );
    for (domain, agent) in &out.registered_agents {
        println!("agent domain {domain}: node {agent}");
    }
    if s.queries > 0 {
        println!(
            "queries {}: {} found, mean response {:.3} ms",
            s.queries, s.successes, s.mean_response_ms
        );
    }
    if compare {
        print!("{}", compare_static_dynamic(&scenario)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            trace,
            metrics,
            compare_static,
        } => run(scenario, seed, trace, metrics, compare_static),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
