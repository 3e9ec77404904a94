//! `stagger`: dataset generation, training, evaluation and analyses for
//! staggered neural PDE solvers.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stagger_core::parallel::WorkerPool;

use crate::commands::{Checkpoint, Context};
use crate::config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Layout(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Layout(_) => "layout",
            CliError::Io(_) => "io",
            CliError::Solver(_) => "solver",
            CliError::Training(_) => "training",
            CliError::Internal(_) => "internal",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Layout(_) => 3,
            CliError::Io(_) => 4,
            CliError::Solver(_) | CliError::Training(_) => 5,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<stagger_core::Error> for CliError {
    fn from(e: stagger_core::Error) -> Self {
        use stagger_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Config(msg),
            E::Dimension(_) | E::Shape { .. } | E::Length { .. } | E::Layout(_) | E::Contract(_) => CliError::Layout(msg),
            E::Format { .. } | E::Io(_) => CliError::Io(msg),
            E::Solver { .. } => CliError::Solver(msg),
            E::Training(_) | E::Diverged { .. } => CliError::Training(msg),
            E::Metric(_) => CliError::Internal(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "stagger", version, about = "Staggered spatial-temporal neural PDE solver experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Oracle trajectories, evaluation bootstraps and a residual audit.
    Generate,
    /// Trains the shared coarse solver on the staggered residual loss.
    Train,
    /// Error-k against the reference solver plus snapshots at the checkpoints.
    Evaluate(SolverArgs),
    /// One staggered rollout over the evaluation horizon.
    Rollout(SolverArgs),
    #[command(subcommand)]
    Analyze(Analysis),
    /// Recovers an initial state through the differentiable rollout.
    Control(SolverArgs),
}

#[derive(clap::Args)]
struct SolverArgs {
    /// Checkpoint directory, or `oracle` for the reference-solver mock.
    /// Defaults to `<out>/train/checkpoint`.
    #[arg(long)]
    checkpoint: Option<String>,
}

#[derive(Subcommand)]
enum Analysis {
    /// Bandwidth of powers of the diffusion transfer matrix.
    Bandwidth,
    /// Joint vs per-subgrid linear least squares on oracle state pairs.
    Prop1,
    /// Multiply-accumulate counts per worker.
    Gmacs,
}

fn checkpoint<'a>(args: &'a SolverArgs, default: &'a Path) -> Checkpoint<'a> {
    match args.checkpoint.as_deref() {
        Some("oracle") => Checkpoint::OracleMock,
        Some(p) => Checkpoint::Params(Path::new(p)),
        None => Checkpoint::Params(default),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let workers = match cli.workers {
        Some(n) => WorkerPool::new(n)?,
        None => WorkerPool::with_hardware_parallelism()?,
    };
    let out = cfg.output_dir.clone();
    let ctx = Context {
        cfg: &cfg,
        out: &out,
        workers: &workers,
    };
    let default_checkpoint = out.join("train").join("checkpoint");
    match &cli.command {
        Command::Generate => commands::generate(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Evaluate(a) => commands::evaluate_cmd(&ctx, &checkpoint(a, &default_checkpoint)),
        Command::Rollout(a) => commands::rollout_cmd(&ctx, &checkpoint(a, &default_checkpoint)),
        Command::Control(a) => commands::control(&ctx, &checkpoint(a, &default_checkpoint)),
        Command::Analyze(Analysis::Bandwidth) => commands::bandwidth(&ctx),
        Command::Analyze(Analysis::Prop1) => commands::prop1(&ctx),
        Command::Analyze(Analysis::Gmacs) => commands::gmacs(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
