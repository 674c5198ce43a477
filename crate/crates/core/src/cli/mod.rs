//! The `coupled-sampler` command line.

pub mod config;
mod commands;
pub mod output;
pub mod svg;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};

pub use commands::{run_couple, run_sample, run_sweep};

/// Exit status for config or argument validation failures.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for runtime errors and failed property checks.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "coupled-sampler", version, about = "Coupled diffusion sampling on analytic models")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for batch sampling.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample one model and check it against exact draws.
    Sample,
    /// Run two coupled chains, or the multi-view scene demo.
    Couple,
    /// Repeat a coupled run over a grid of coupling strengths.
    Sweep,
    /// Build, convert and align noise schedules.
    Schedule {
        #[command(subcommand)]
        action: ScheduleCommand,
    },
    /// Run the built-in oracle checks.
    Verify,
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCommand {
    /// Write `schedule.json` from the `schedule` entry of the config (or the default).
    Build,
    /// Convert one noise level between parameterizations.
    Convert {
        #[arg(long, value_enum)]
        from: Level,
        #[arg(long, value_enum)]
        to: Level,
        #[arg(long, allow_hyphen_values = true)]
        value: f64,
    },
    /// Map every step of one schedule file to the nearest step of another.
    Align {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    AlphaBar,
    EdmSigma,
    FlowTime,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        // A pool that already exists (for example in tests) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match &cli.command {
        Command::Sample => commands::run_sample(cli).map(|_| 0),
        Command::Couple => commands::run_couple(cli).map(|_| 0),
        Command::Sweep => commands::run_sweep(cli).map(|_| 0),
        Command::Schedule { action } => commands::run_schedule(cli, action).map(|_| 0),
        Command::Verify => verify::run_verify(),
    }
}
