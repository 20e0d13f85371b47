use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cyin_core::{Ablation, Protocol};

use crate::sweep::Sweep;

#[derive(Debug, Parser)]
#[command(name = "cyin", version, about = "Cyclic information bottleneck experiments on multimodal features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file and its metadata sidecar.
    GenData(GenDataArgs),
    /// Train a model (both stages) and write checkpoint, log and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint under missing-modality protocols.
    Eval(EvalArgs),
    /// Assemble Markdown/CSV tables (and an optional SVG plot) from manifests.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Regression,
    Classification,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 3)]
    pub modalities: usize,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Number of classes (classification only).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub seq_len: usize,
    /// Channels per modality, comma separated; one value is repeated.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    pub feat_dims: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 2)]
    pub distractor_dim: usize,
    #[arg(long, short, default_value = "data.cyin")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset file; without it the config's synthetic spec is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    /// Training seed; overrides CYIN_SEED, which overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file; without it the checkpoint's synthetic spec is regenerated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluate every sample instead of the held-out split.
    #[arg(long)]
    pub all_samples: bool,
    /// complete, fixed:<set> (indices or l/a/v) or random:<mr>; repeatable.
    #[arg(long = "protocol", value_parser = parse_protocol)]
    pub protocols: Vec<Protocol>,
    /// Random-protocol sweep `random:<from>..<to>:<step>`.
    #[arg(long, value_parser = parse_sweep)]
    pub sweep: Option<Sweep>,
    /// Number of mask seeds; above 1, rows report mean and stddev.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// First mask seed.
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Directory for eval.csv, eval.json and manifest.json.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for manifest.json files.
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also draw the primary metric against the missing rate as SVG.
    #[arg(long)]
    pub plot: bool,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: cyin_core::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: cyin_core::Error| e.to_string())
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    s.parse()
}
