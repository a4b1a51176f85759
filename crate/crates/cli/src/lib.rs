//! `cvar` command-line workflows: simulate panels, fit a fixed rank, scan
//! ranks over windows and replicates, and forecast with BMOS or BMA.
//!
//! Each command writes `run.json` next to its outputs; passing it back with
//! `--config` reproduces the run bit for bit.

pub mod commands;
pub mod config;
pub mod error;
pub mod fitting;
pub mod io;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "cvar",
    version,
    about = "Bayesian cointegrated VAR sampling, rank selection and forecasting"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a panel from a preset or random cointegrated model
    Synth(config::Flags),
    /// Sample one chain at a fixed rank
    Fit(config::Flags),
    /// Bayes-factor rank posterior over windows and replicates
    Rank(config::Flags),
    /// BMOS or BMA forecasts, or evaluation over random segments
    Predict(config::Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &config::Flags) {
        match self {
            Command::Synth(f) => ("synth", f),
            Command::Fit(f) => ("fit", f),
            Command::Rank(f) => ("rank", f),
            Command::Predict(f) => ("predict", f),
        }
    }
}

/// Runs one resolved command on a pool of `cfg.jobs` workers.
pub fn execute(cfg: &RunConfig) -> CliResult<()> {
    let out = io::ensure_dir(&cfg.out)?;
    io::write_json(&out.join("run.json"), cfg)?;
    let pool = fitting::pool(cfg.jobs)?;
    pool.install(|| match cfg.command.as_deref() {
        Some("synth") => commands::synth::run(cfg),
        Some("fit") => commands::fit::run(cfg),
        Some("rank") => commands::rank::run(cfg),
        Some("predict") => commands::predict::run(cfg),
        other => Err(CliError::usage(format!("unknown command {other:?}"))),
    })
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_USAGE } else { 0 };
        }
    };
    let (name, flags) = cli.command.parts();
    let result = RunConfig::resolve(name, flags).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cvar {name}: {e}");
            e.exit_code()
        }
    }
}
