//! Command-line interface definition.

use std::path::PathBuf;

use bitstash_core::stash::{StashFormat, StashPolicy};
use bitstash_core::tensor::Precision;
use bitstash_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "bitstash",
    version,
    about = "Activation-stash compression benchmarks and desk-scale training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compression benchmark over six reference activation shapes at five
    /// density levels
    Bench(BenchArgs),
    /// Train a spec model on synthetic data under a stash policy
    Train(TrainArgs),
    /// Per-layer activation footprint and strategy comparison
    Footprint(FootprintArgs),
    /// Histogram of absolute activation values over a forward pass
    Hist(HistArgs),
    /// Recomputation MACs vs stash element moves per checkpoint interval
    Opcount(OpcountArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Md,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyFormat {
    Dense,
    Bitmap,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Fp32,
    Fp16,
}

/// Output destination and format, shared by all subcommands.
#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    /// Write the report here (atomically); stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report format
    #[arg(long, value_enum, default_value = "csv")]
    pub format: OutputFormat,
}

/// Stash-policy flags, shared by the commands that take a policy.
#[derive(Args, Debug, Clone)]
pub struct PolicyArgs {
    /// Stash storage format
    #[arg(long, value_enum, default_value = "bitmap")]
    pub policy: PolicyFormat,
    /// Activation pruning threshold (|v| < t is dropped; 0 = off)
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f32,
    /// Stored value precision
    #[arg(long, value_enum, default_value = "fp32")]
    pub precision: PrecisionArg,
    /// Checkpoint interval m: store every m-th layer's input, recompute the
    /// rest (1 = off)
    #[arg(long = "checkpoint-m", default_value_t = 1)]
    pub checkpoint_m: usize,
}

impl PolicyArgs {
    pub fn to_policy(&self) -> Result<StashPolicy> {
        if self.checkpoint_m == 0 {
            return Err(Error::InvalidInput("--checkpoint-m must be >= 1".into()));
        }
        let format = match self.policy {
            PolicyFormat::Dense => StashFormat::Dense,
            PolicyFormat::Bitmap => StashFormat::Bitmap,
        };
        let precision = match self.precision {
            PrecisionArg::Fp32 => Precision::Fp32,
            PrecisionArg::Fp16 => Precision::Fp16,
        };
        let policy = StashPolicy::new(format, self.threshold, precision, None)?;
        Ok(policy.with_checkpoint_m(self.checkpoint_m))
    }
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Seed for the synthesized activations
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model spec JSON
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Seed for weights and the synthetic dataset
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    /// Batch size (defaults to the spec's batch size)
    #[arg(long)]
    pub batch: Option<usize>,
    /// Synthetic dataset size
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    /// SGD learning rate
    #[arg(long, default_value_t = 0.01)]
    pub lr: f32,
    /// Train on IDX image data instead of the synthetic task
    #[arg(long = "data-idx", requires = "labels_idx")]
    pub data_idx: Option<PathBuf>,
    /// IDX label file paired with --data-idx
    #[arg(long = "labels-idx", requires = "data_idx")]
    pub labels_idx: Option<PathBuf>,
    /// Dump final parameters as little-endian f32 to this file
    #[arg(long = "params-out")]
    pub params_out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct FootprintArgs {
    /// Model spec JSON
    #[arg(long)]
    pub spec: PathBuf,
    /// Measure densities on a live forward pass instead of the assumed
    /// per-layer-type table
    #[arg(long)]
    pub live: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct HistArgs {
    /// Model spec JSON
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Comma-separated increasing bin edges for |v|
    #[arg(long, default_value = "0,0.01,0.05,0.1,0.5,1,2,5,10")]
    pub edges: String,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct OpcountArgs {
    /// Model spec JSON
    #[arg(long)]
    pub spec: PathBuf,
    /// Checkpoint intervals to tabulate
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub m: Vec<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}
