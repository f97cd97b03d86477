//! Command-line front end: argument parsing, run bookkeeping and the six
//! subcommands.

pub mod config;
mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub use commands::{run, FileDigest, RunManifest, RUN_MANIFEST_FILE, RESOLVED_CONFIG_FILE};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CHUNKFLOW_OUT";
pub const DEFAULT_OUT: &str = "out";

#[derive(Debug, Parser)]
#[command(name = "chunkflow", version, about = "B-spline action chunks, flow-matching policies and asynchronous execution")]
pub struct Cli {
    /// Output root [env: CHUNKFLOW_OUT, default: out]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

/// Config file and `key=value` overrides accepted by every subcommand.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Flat TOML file of keys for this subcommand
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one key, e.g. `--set steps=500`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a B-spline to a trajectory CSV
    Fit(FitArgs),
    /// Generate expert demonstrations in the simulator
    GenDemos(GenDemosArgs),
    /// Train a flow-matching chunk policy on demonstrations
    Train(TrainArgs),
    /// Score action representations by reconstruction fidelity
    BenchRepr(BenchReprArgs),
    /// Compare raw and spline-fitted trajectory smoothness
    BenchSmooth(BenchSmoothArgs),
    /// Run closed-loop episodes in sync or async mode
    RunSim(RunSimArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Trajectory CSV (`t,dim0,...`)
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub n_ctrl: Option<usize>,
    #[arg(long)]
    pub degree: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GenDemosArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Dataset name under `<out>/demos/`
    #[arg(long)]
    pub name: Option<String>,
    /// static | dynamic
    #[arg(long)]
    pub task: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Demo directory [default: <out>/demos/default]
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchReprArgs {
    /// Directory of trajectory CSVs [default: smooth expert windows]
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chunks: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BenchSmoothArgs {
    /// Demo directory [default: fresh noisy expert rollouts]
    #[arg(long)]
    pub demos: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct RunSimArgs {
    /// flow | expert
    #[arg(long)]
    pub policy: Option<String>,
    /// sync | async
    #[arg(long)]
    pub mode: Option<String>,
    /// on | off
    #[arg(long)]
    pub refit: Option<String>,
    #[arg(long)]
    pub latency_ticks: Option<usize>,
    /// continuous | drain
    #[arg(long)]
    pub cadence: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// static | dynamic
    #[arg(long)]
    pub task: Option<String>,
    /// Model artifact [default: <out>/train/model.json]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Run against the wall clock instead of simulated time
    #[arg(long)]
    pub wall_clock: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Failure split by exit status.
#[derive(Debug)]
pub enum Failure {
    /// bad arguments, configuration or inputs
    Usage(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error().fmt(f)
    }
}

impl std::error::Error for Failure {}
