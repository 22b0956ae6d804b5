//! `dstc`: gradient checks, parameter audits, toy training, ablation sweeps
//! and oracle comparisons for the deformably-scaled transposed convolution.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub struct CliError(pub String);

impl CliError {
    pub fn new(msg: impl Into<String>) -> Self {
        CliError(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<dstc_core::DstcError> for CliError {
    fn from(e: dstc_core::DstcError) -> Self {
        CliError(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError(e.to_string())
    }
}

/// Result of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

pub const THREADS_ENV: &str = "DSTC_THREADS";

#[derive(Parser)]
#[command(name = "dstc", version, about = "Deformably-scaled transposed convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences.
    Gradcheck(commands::gradcheck::Args),
    /// Parameter counts of every variant for one layer geometry.
    Params(commands::params::Args),
    /// Train the configured variant and the plain baseline on a toy task.
    Train(commands::train::Args),
    /// Retrain over a list of K_sigma values or variance sets.
    Sweep(commands::sweep::Args),
    /// Check the fast scatter against the brute-force oracle on random cases.
    OracleCompare(commands::oracle::Args),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::new(format!("{THREADS_ENV} must be a thread count, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Gradcheck(a) => commands::gradcheck::run(a),
        Command::Params(a) => commands::params::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Sweep(a) => commands::sweep::run(a),
        Command::OracleCompare(a) => commands::oracle::run(a),
    });
    match result {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("dstc: {e}");
            ExitCode::from(2)
        }
    }
}
