//! Experiment configuration: command-line flags layered over an optional
//! JSON config file layered over built-in defaults.

use crate::Failure;
use clap::Args;
use mfgcc::cc_solver::{SolveMode, SolveOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const DEFAULT_GRID: [usize; 8] = [8, 16, 32, 64, 128, 256, 512, 1024];

/// Flags shared by every subcommand. Everything is optional so that unset
/// flags fall through to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Model file (JSON).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Experiment config file (JSON). Flags given on the command line win
    /// over its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Depth of the scenario tree.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=24))]
    pub depth: Option<u32>,
    #[arg(long)]
    pub picard_tol: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_iters: Option<u64>,
    /// Initial damping in (0, 1].
    #[arg(long)]
    pub damping: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub continuation_steps: Option<u64>,
    /// auto, picard_only or continuation.
    #[arg(long)]
    pub mode: Option<SolveMode>,
    /// Accept models that only pass permissive validation.
    #[arg(long)]
    pub allow_permissive: bool,
    /// Population sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub n_grid: Option<Vec<usize>>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub replications: Option<u64>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: Option<u64>,
    /// Population size for `simulate`.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub agents: Option<u64>,
    /// Exit with code 4 when a checked threshold fails.
    #[arg(long)]
    pub gate: bool,
}

/// Config file contents. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<PathBuf>,
    depth: Option<usize>,
    picard_tol: Option<f64>,
    max_iters: Option<usize>,
    damping: Option<f64>,
    continuation_steps: Option<usize>,
    mode: Option<String>,
    allow_permissive: Option<bool>,
    n_grid: Option<Vec<usize>>,
    replications: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    agents: Option<usize>,
    gate: Option<bool>,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub depth: usize,
    pub solver: SolveOptions,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub agents: usize,
    #[serde(skip)]
    pub gate: bool,
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::config(anyhow::anyhow!(msg.into()))
}

fn resolve_path(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn resolve(flags: &Flags) -> Result<Self, Failure> {
        let (file, base) = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    config_error(format!("cannot read config {}: {e}", path.display()))
                })?;
                let file: FileConfig = serde_json::from_str(&text).map_err(|e| {
                    config_error(format!("malformed config {}: {e}", path.display()))
                })?;
                (file, path.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (FileConfig::default(), PathBuf::new()),
        };
        let defaults = SolveOptions::default();
        let file_mode = match file.mode {
            Some(m) => Some(m.parse::<SolveMode>().map_err(config_error)?),
            None => None,
        };
        let model = flags
            .model
            .clone()
            .or_else(|| file.model.map(|p| resolve_path(&base, p)))
            .ok_or_else(|| config_error("no model given (use --model or a config file)"))?;
        let solver = SolveOptions {
            picard_tol: flags.picard_tol.or(file.picard_tol).unwrap_or(defaults.picard_tol),
            max_iters: flags
                .max_iters
                .map(|v| v as usize)
                .or(file.max_iters)
                .unwrap_or(defaults.max_iters),
            damping: flags.damping.or(file.damping).unwrap_or(defaults.damping),
            continuation_steps: flags
                .continuation_steps
                .map(|v| v as usize)
                .or(file.continuation_steps)
                .unwrap_or(defaults.continuation_steps),
            mode: flags.mode.or(file_mode).unwrap_or(defaults.mode),
            allow_permissive: flags.allow_permissive || file.allow_permissive.unwrap_or(false),
        };
        solver.check().map_err(|e| config_error(e.to_string()))?;
        let cfg = ExperimentConfig {
            model,
            depth: flags.depth.map(|d| d as usize).or(file.depth).unwrap_or(8),
            solver,
            n_grid: flags.n_grid.clone().or(file.n_grid).unwrap_or_else(|| DEFAULT_GRID.to_vec()),
            replications: flags
                .replications
                .map(|v| v as usize)
                .or(file.replications)
                .unwrap_or(64),
            seed: flags.seed.or(file.seed).unwrap_or(2024),
            agents: flags.agents.map(|v| v as usize).or(file.agents).unwrap_or(64),
            gate: flags.gate || file.gate.unwrap_or(false),
            out: flags
                .out
                .clone()
                .or_else(|| file.out.map(|p| resolve_path(&base, p)))
                .unwrap_or_else(|| PathBuf::from("out")),
            threads: flags.threads.map(|v| v as usize).or(file.threads),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), Failure> {
        if !(1..=24).contains(&self.depth) {
            return Err(config_error(format!("depth must lie in 1..=24, got {}", self.depth)));
        }
        if self.replications == 0 {
            return Err(config_error("replications must be at least 1"));
        }
        if self.agents < 2 {
            return Err(config_error("agents must be at least 2"));
        }
        if self.n_grid.is_empty() || self.n_grid.iter().any(|&n| n < 2) {
            return Err(config_error("n_grid must be nonempty with every size at least 2"));
        }
        if self.threads == Some(0) {
            return Err(config_error("threads must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 over the resolved settings and the model contents. Output
    /// location and run-control flags cannot change results and are left out.
    pub fn hash(&self, model_json: &serde_json::Value) -> String {
        let mut settings = serde_json::to_value(self).expect("config serializes");
        settings["model"] = model_json.clone();
        let canonical = serde_json::to_vec(&settings).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}
