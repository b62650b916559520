use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "smc", version, about = "Sequential Monte Carlo for state-space models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a filter over a latent chain.
    Run {
        #[command(flatten)]
        args: RunArgs,
        #[command(flatten)]
        exec: Exec,
    },
    /// Particle marginal Metropolis–Hastings over parameter nodes.
    Pmmh {
        #[command(flatten)]
        args: PmmhArgs,
        #[command(flatten)]
        exec: Exec,
    },
    /// Draw a data set from a model by forward simulation.
    Simulate(SimulateArgs),
    /// Re-run the command recorded in a run.json manifest.
    Replay {
        /// Path to a run.json written by `run` or `pmmh`.
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        exec: Exec,
    },
}

/// Execution settings that never change results.
#[derive(Debug, Clone, Args)]
pub struct Exec {
    /// Worker threads for per-particle work (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Inputs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Data CSV: header row, one column per observed variable.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON object of constants.
    #[arg(long)]
    pub constants: Option<PathBuf>,
    /// JSON object of initial values.
    #[arg(long)]
    pub inits: Option<PathBuf>,
    /// Latent chain variable.
    #[arg(long, default_value = "x")]
    pub latent: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterChoice {
    Bootstrap,
    Auxiliary,
    LiuWest,
    Enkf,
    Kalman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerChoice {
    Bootstrap,
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SummaryCloud {
    Weighted,
    Equal,
}

/// Settings shared by every particle filter.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ParticleArgs {
    /// Resampling threshold τ on ESS/K.
    #[arg(long, default_value_t = 0.8)]
    pub thresh: f64,
    /// systematic, residual or multinomial.
    #[arg(long, default_value = "systematic")]
    pub method: String,
    /// Auxiliary lookahead: mean or simulate.
    #[arg(long, default_value = "simulate")]
    pub lookahead: String,
    /// Propose or perturb parameters on their raw scale instead of an
    /// unconstrained transform.
    #[arg(long)]
    pub raw_scale: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long, value_enum)]
    pub filter: FilterChoice,
    #[arg(long, default_value_t = 1000)]
    pub particles: usize,
    #[command(flatten)]
    pub particle: ParticleArgs,
    /// Liu–West discount d.
    #[arg(long, default_value_t = 0.99)]
    pub discount: f64,
    /// Liu–West parameter nodes (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub params: Vec<String>,
    /// Keep every time point instead of only the last.
    #[arg(long)]
    pub save_all: bool,
    /// Write particle dumps.
    #[arg(long)]
    pub samples: bool,
    /// Cloud summarized in filter_summary.csv.
    #[arg(long, value_enum, default_value = "weighted")]
    pub summary_cloud: SummaryCloud,
    /// Histogram bins for Liu–West parameters.
    #[arg(long, default_value_t = 30)]
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PmmhArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Parameter nodes to sample (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub target: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    /// Iterations after which adaptation stops (default: iterations / 2).
    #[arg(long)]
    pub burn_in: Option<usize>,
    /// File holding the initial proposal covariance, one row per line.
    #[arg(long)]
    pub prop_cov: Option<PathBuf>,
    /// Proposal standard deviation used when no covariance file is given.
    #[arg(long, default_value_t = 0.1)]
    pub prop_sd: f64,
    #[arg(long)]
    pub adaptive: bool,
    /// Re-estimate the current likelihood before every proposal.
    #[arg(long)]
    pub pf_resample: bool,
    #[arg(long, value_enum, default_value = "bootstrap")]
    pub inner: InnerChoice,
    #[arg(long, default_value_t = 1000)]
    pub inner_particles: usize,
    #[command(flatten)]
    pub particle: ParticleArgs,
    /// Write sampled latent paths to trajectories.csv.
    #[arg(long)]
    pub trajectories: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub constants: Option<PathBuf>,
    #[arg(long)]
    pub inits: Option<PathBuf>,
    /// Variables written as columns (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub variables: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Command recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Recorded {
    Run(RunArgs),
    Pmmh(PmmhArgs),
}
