//! `friendbounds` batch driver.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 computation
//! error, 4 output could not be written.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("computation error: {0}")]
    Compute(#[from] friendbounds::Error),
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Compute(_) => 3,
            CliError::Output(_) => 4,
        }
    }

    /// Treat a library error raised while reading or validating inputs as a
    /// configuration problem.
    pub fn input(e: friendbounds::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "friendbounds", version, about = "Bounds on the return to friendships")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Write individuals.csv, edges.csv and truth.json from a generator.
    Simulate,
    /// First stage, reduced form, OLS, IV, calibrated IV and bounds.
    Estimate,
    /// Placebo battery, residual variation, CDF shifts and dominance tests.
    Diagnose,
    /// Repeated simulate-estimate runs with coverage summaries.
    Mc,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
