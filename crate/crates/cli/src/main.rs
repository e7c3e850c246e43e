//! `mfgcc`: validate models, solve the consistency system, simulate finite
//! populations and measure the epsilon-Nash rates.

mod artifacts;
mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::{ExperimentConfig, Flags};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mfgcc", version, about = "Constrained LQ mean-field game lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a model against the strict (or permissive) assumptions.
    Validate(Flags),
    /// Solve the consistency system and write means, strategy and diagnostics.
    SolveCc(Flags),
    /// Compare the iterative solver with the direct linear solve.
    OracleCheck(Flags),
    /// Simulate finite populations under the decentralized strategy.
    Simulate(Flags),
    /// Gap statistics, rate fits and best-response gains across population sizes.
    NashRates(Flags),
}

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub const VALIDATION: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DIVERGENCE: u8 = 3;
    pub const GATE: u8 = 4;

    pub fn validation(error: anyhow::Error) -> Self {
        Failure { code: Self::VALIDATION, error }
    }

    pub fn config(error: anyhow::Error) -> Self {
        Failure { code: Self::CONFIG, error }
    }

    pub fn divergence(error: anyhow::Error) -> Self {
        Failure { code: Self::DIVERGENCE, error }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags) = match &cli.command {
        Command::Validate(f) => ("validate", f),
        Command::SolveCc(f) => ("solve-cc", f),
        Command::OracleCheck(f) => ("oracle-check", f),
        Command::Simulate(f) => ("simulate", f),
        Command::NashRates(f) => ("nash-rates", f),
    };
    let code = match ExperimentConfig::resolve(flags).and_then(|cfg| commands::run(name, &cfg)) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    };
    ExitCode::from(code)
}
