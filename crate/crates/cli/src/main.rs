mod bench;
mod form;
mod run;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes.
const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

/// A check that ran to completion and found a broken invariant.
#[derive(Debug)]
pub struct InvariantViolation(pub String);

impl std::fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant violation: {}", self.0)
    }
}

impl std::error::Error for InvariantViolation {}

#[derive(Parser)]
#[command(name = "ravnest", version, about = "Cluster formation, asynchronous pipeline training and multi-ring averaging on a simulated network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Group an inventory of nodes into clusters with the genetic algorithm.
    Form(form::FormArgs),
    /// Train from a config file and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Use a saved plan instead of forming clusters.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Run directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate inputs and print the plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Time multi-ring against single-ring all-reduce on the simulator.
    AllreduceBench(bench::BenchArgs),
    /// Run the oracle checks and report each comparison.
    Verify(verify::VerifyArgs),
    /// Train once per cluster count and collect the summaries.
    Sweep(run::SweepArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InvariantViolation>().is_some() {
        return EXIT_INVARIANT;
    }
    match err.downcast_ref::<ravnest::Error>() {
        Some(ravnest::Error::Session(_) | ravnest::Error::Partition { .. }) => EXIT_INFEASIBLE,
        Some(
            ravnest::Error::Staleness { .. }
            | ravnest::Error::Stall { .. }
            | ravnest::Error::Protocol(_)
            | ravnest::Error::FlowControl(_)
            | ravnest::Error::Livelock { .. }
            | ravnest::Error::Divergence { .. }
            | ravnest::Error::Numeric(_),
        ) => EXIT_INVARIANT,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Form(args) => form::run(args),
        Command::Train { config, plan, out, dry_run } => run::train_command(&config, plan.as_deref(), out.as_deref(), dry_run),
        Command::AllreduceBench(args) => bench::run(args),
        Command::Verify(args) => verify::run(args),
        Command::Sweep(args) => run::sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
