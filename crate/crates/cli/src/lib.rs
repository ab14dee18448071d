//! Command-line driver: training runs, sampling, NFE sweeps and diagnostics.

mod diagnose;
mod eval;
mod plot;
mod rundir;
mod sample;
mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathdiff::metrics::MetricKind;
use pathdiff::persistence::ModelRole;
use pathdiff::sampler::StepStrategy;
use pathdiff::Result;

pub use plot::sweep_svg;
pub use rundir::{checkpoint_name, LOCK_FILE};
pub use train::{DIVERGENCE_FILE, LOG_FILE};

#[derive(Debug, Parser)]
#[command(name = "pathdiff", version, about = "Shortest-path diffusion training and few-step sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train base, EMA and graph models and write a run directory.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Score checkpoints across sampling step counts.
    Eval(EvalArgs),
    /// Print residual and edge statistics and run the shortest-path self-test.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Base,
    Ema,
}

impl From<RoleArg> for ModelRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Base => ModelRole::Base,
            RoleArg::Ema => ModelRole::Ema,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Uniform,
    Quadratic,
}

impl From<StrategyArg> for StepStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Uniform => StepStrategy::Uniform,
            StrategyArg::Quadratic => StepStrategy::Quadratic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    MmdRbf,
    SlicedWasserstein,
    FidProxy,
}

impl From<MetricArg> for MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::MmdRbf => MetricKind::MmdRbf,
            MetricArg::SlicedWasserstein => MetricKind::SlicedWasserstein,
            MetricArg::FidProxy => MetricKind::FidProxy,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the total iteration count.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Train with the noise loss only.
    #[arg(long)]
    pub disable_relax: bool,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Network evaluations, i.e. the number of visited timesteps.
    #[arg(long)]
    pub nfe: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "ema")]
    pub model: RoleArg,
    #[arg(long, default_value_t = 1000)]
    pub batch: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    pub strategy: StrategyArg,
    /// Output sample file; `.txt` and `.png` siblings are written next to it.
    #[arg(long, default_value = "samples.pdsm")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoints to compare; repeat the flag or separate with commas.
    #[arg(long = "checkpoint", required = true, value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
    /// Labels for the checkpoints, in order; defaults to file stems.
    #[arg(long = "label", value_delimiter = ',')]
    pub labels: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    pub nfe: Vec<usize>,
    #[arg(long, value_enum, default_value = "sliced-wasserstein")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "ema")]
    pub model: RoleArg,
    #[arg(long, default_value_t = 2000)]
    pub batch: usize,
    #[arg(long, default_value_t = 2000)]
    pub reference_size: usize,
    /// Seed of the initial noise shared by all checkpoints.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "uniform")]
    pub strategy: StrategyArg,
    /// Directory receiving sweep.csv, sweep.txt and sweep.svg.
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    /// Checkpoint to inspect; a freshly initialized model when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Config for the fresh model when no checkpoint is given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of (t, k) pairs to report.
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace every model by the exact noise predictor for the batch.
    #[arg(long)]
    pub perfect_predictor: bool,
    /// Step graph file (`node t d` / `edge k t w` lines) to solve.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Random graphs in the shortest-path self-test.
    #[arg(long, default_value_t = 1000)]
    pub oracle_graphs: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train::run(&a).map(|_| ()),
        Command::Sample(a) => sample::run(&a),
        Command::Eval(a) => eval::run(&a).map(|_| ()),
        Command::Diagnose(a) => diagnose::run(&a),
    }
}

pub use eval::run as run_eval;
pub use sample::run as run_sample;
pub use train::run as run_train;
