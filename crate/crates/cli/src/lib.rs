//! Config-driven experiment runner. Each subcommand writes `summary.json`
//! and CSV artifacts into the output directory; reruns with the same config
//! and seed reproduce them byte for byte at any thread count.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;

/// Exit status for configuration and model errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit status for numeric failures during a run.
pub const EXIT_NUMERIC: i32 = 3;
/// Exit status for I/O problems, including a busy output directory.
pub const EXIT_IO: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<fkvi_core::Error> for CliError {
    fn from(e: fkvi_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fkvi", version, about = "Reflected diffusions, BSVIs and probabilistic Robin-boundary PDE solvers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "fkvi.toml")]
    pub config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `ensemble.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate the reflected SDE at `[point]`.
    ForwardSim,
    /// Evaluate u(t, x) at `[point]`.
    Solve,
    /// Infinite-horizon problem by truncation.
    Elliptic {
        /// Start point, comma separated; defaults to `[point].x`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<f64>,
    },
    /// Coupled-noise continuity scan along `[continuity]`.
    Continuity,
    /// Finite-difference reference for one-dimensional problems.
    ValidateFd,
    /// Finite-difference PDE residuals of a candidate u.
    Residuals,
    /// Sampled compatibility conditions.
    CompatCheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::ForwardSim => "forward-sim",
            Command::Solve => "solve",
            Command::Elliptic { .. } => "elliptic",
            Command::Continuity => "continuity",
            Command::ValidateFd => "validate-fd",
            Command::Residuals => "residuals",
            Command::CompatCheck => "compat-check",
        }
    }
}

/// Loads the config, applies overrides, runs the structural checks and the
/// command, and writes the artifacts. Returns the summary text.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = ExperimentConfig::load(&cli.global.config)?;
    if let Some(seed) = cli.global.seed {
        cfg.ensemble.seed = seed;
    }
    if let Command::Elliptic { x, tol, lambda } = &cli.command {
        if let Some(x) = x {
            let t = cfg.point.as_ref().map(|p| p.t).unwrap_or(0.0);
            cfg.point = Some(config::PointSpec { t, x: x.clone() });
        }
        if let Some(spec) = cfg.elliptic.as_mut() {
            if let Some(tol) = tol {
                spec.tol = *tol;
            }
            if lambda.is_some() {
                spec.lambda = *lambda;
            }
        }
    }
    cfg.check_structure()?;
    let out = output::OutDir::lock(&cli.global.out)?;
    let outcome = commands::dispatch(&cli.command, &cfg)?;
    out.write_summary(cli.command.name(), &cfg, &outcome)
}
