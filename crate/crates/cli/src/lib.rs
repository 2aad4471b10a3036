//! `rlvla` command-line front end.
//!
//! Every subcommand reads one experiment config, writes its outputs under
//! `--out` and prints a short table. Exit codes: 0 success, 2 config error,
//! 3 runtime error (deadlock, watchdog, oversize sample, unreadable data).

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use rlvla_core::sim::SimError;

pub use config::{Executor, ExperimentConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rlvla", version, about = "Simulator and toolkit for asynchronous VLA RL training pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Executor for simulate and sweep; overrides the config.
    #[arg(long, value_enum, global = true)]
    pub executor: Option<Executor>,
    /// Write the event log (NDJSON) of simulate runs here.
    #[arg(long, global = true)]
    pub event_log: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every (strategy, device count) of the [run] section.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Scaling sweep over the device counts of the [sweep] section.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Pack a corpus into fixed-capacity sequences.
    Pack {
        #[command(flatten)]
        common: Common,
    },
    /// FP8 quantization error by granularity, plus the compression table.
    Quantbench {
        #[command(flatten)]
        common: Common,
    },
    /// Fit cost coefficients to observed timings.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate metrics reports against a baseline strategy.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report files; added to the [report] inputs of the config.
        inputs: Vec<PathBuf>,
    },
}

/// Settings shared by every subcommand after merging flags over the config.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub executor: Executor,
    pub event_log: Option<PathBuf>,
}

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_OUT: &str = "rlvla-out";

impl Context {
    pub fn new(common: &Common, require_config: bool) -> Result<Self, CliError> {
        let config = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None if require_config => return Err(CliError::Config("--config is required".into())),
            None => ExperimentConfig::default(),
        };
        Ok(Self {
            seed: common.seed.or(config.seed).unwrap_or(DEFAULT_SEED),
            out: common.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into()),
            executor: common.executor.or(config.executor).unwrap_or(Executor::Virtual),
            event_log: common.event_log.clone(),
            config,
        })
    }

    /// Write one output file under the output directory.
    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Run one parsed invocation; stdout gets the human-readable table.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common } => commands::simulate(&Context::new(&common, true)?),
        Command::Sweep { common } => commands::sweep(&Context::new(&common, true)?),
        Command::Pack { common } => commands::pack(&Context::new(&common, true)?),
        Command::Quantbench { common } => commands::quantbench(&Context::new(&common, true)?),
        Command::Calibrate { common } => commands::calibrate(&Context::new(&common, true)?),
        Command::Report { common, inputs } => commands::report(&Context::new(&common, false)?, &inputs),
    }
}
