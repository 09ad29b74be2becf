//! The `safediff` command line: dataset generation, training, closed-loop
//! evaluation, single rollouts and report merging.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use safediff_core::dataset::{DatasetError, Pool};
use safediff_core::model::ModelError;
use safediff_core::runtime::RuntimeError;

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InvalidRanges(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::NonFinite(_) | ModelError::Nn(_) => CliError::Numeric(e.to_string()),
            ModelError::Data(_) | ModelError::Shape(_) | ModelError::File { .. } => {
                CliError::Data(e.to_string())
            }
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Config(_) => CliError::Usage(e.to_string()),
            RuntimeError::PlanCount { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "safediff", version, about = "Force-safe door-opening planner toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train, seen-test and unseen-test demonstrations.
    GenData(GenDataArgs),
    /// Train a denoiser on a generated dataset.
    Train(TrainArgs),
    /// Run every scene of a test pool in closed loop and score it.
    Eval(EvalArgs),
    /// Run a single scene in closed loop and write its trace.
    Rollout(RolloutArgs),
    /// Merge evaluation directories into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON file overriding any subset of the experiment defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training demonstrations; each test split gets a tenth of this.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Seeds both the weight initialization and the training schedule.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Drop the tactile branch.
    #[arg(long)]
    pub vision_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlannerKind {
    Oracle,
    Safediff,
}

#[derive(Debug, Args)]
pub struct EpisodeArgs {
    /// Dataset directory whose test split supplies the scenes.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = PlannerKind::Safediff)]
    pub planner: PlannerKind,
    /// Model checkpoint, required for the safediff planner.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = Pool::Seen)]
    pub pool: Pool,
    /// Switch on the periodic impulse injector.
    #[arg(long)]
    pub disturbance: bool,
    /// Assert that the checkpoint is a vision-only model.
    #[arg(long)]
    pub vision_only: bool,
    /// Plan states executed between replans.
    #[arg(long)]
    pub replan_every: Option<usize>,
    /// Mixed into every scene seed; omit to use the scenes as stored.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Harmful-force thresholds in newtons, comma separated.
    #[arg(long, value_parser = config::parse_thresholds)]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Zero-based index of the scene within the pool's test split.
    #[arg(long)]
    pub scene_id: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory for the merged report.
    #[arg(long)]
    pub out: PathBuf,
    /// Thresholds in newtons, comma separated; defaults to those of the first run.
    #[arg(long, value_parser = config::parse_thresholds)]
    pub thresholds: Option<Vec<f64>>,
    /// Directories written by `eval`.
    #[arg(required = true, num_args = 1..)]
    pub runs: Vec<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Help and version requests succeed after printing.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Rollout(a) => commands::rollout(&a),
        Command::Report(a) => commands::report(&a),
    }
}
