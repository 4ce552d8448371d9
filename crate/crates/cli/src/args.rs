use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "simnet", version, about = "Learned non-metric similarity for retrieval experiments")]
pub struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true, env = "SIMNET_THREADS")]
    pub threads: Option<usize>,

    /// Run every parallel section on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled feature store with bridge items.
    Gen(GenArgs),
    /// Pre-train a similarity network to imitate cosine on random pairs.
    Warmup(WarmupArgs),
    /// Train a similarity network (or the linear baseline) on a store.
    Train(TrainArgs),
    /// List the pairs a trained network scores worse than cosine.
    Mine(MineArgs),
    /// Mean average precision of one scorer.
    Eval(EvalArgs),
    /// Mean average precision of several scorers side by side.
    Compare(CompareArgs),
}

/// Generator settings: a JSON spec file if given, then any flag overrides.
#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator spec; omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Per-component standard deviation of the noise around a prototype.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Share of each paired class's items replaced by bridge items.
    #[arg(long)]
    pub bridge: Option<f64>,
    /// Share of every class marked as queries (0 for none).
    #[arg(long)]
    pub queries: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Constant,
    LinearDecay,
}

#[derive(Args, Debug, Clone)]
pub struct ArchArgs {
    /// Layer preset: A, B, C or D.
    #[arg(long, default_value = "B")]
    pub arch: String,
    /// Multiplier on the preset's hidden widths.
    #[arg(long, default_value_t = 0.125)]
    pub scale: f64,
    /// Explicit hidden widths, e.g. 256,256 (overrides --arch).
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct WarmupArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Length K of each feature vector.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2_000_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 10_000)]
    pub val_pairs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, value_enum, default_value_t = Schedule::LinearDecay)]
    pub schedule: Schedule,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub weight_decay: f64,
    /// Seed for initialization and for the random pairs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct StoreArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Query share used when the store has no query sidecar.
    #[arg(long, default_value_t = 0.2)]
    pub query_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Simnet,
    Linear,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    /// Start from this checkpoint (e.g. a warm-up) instead of a fresh model.
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, value_enum, default_value_t = Family::Simnet)]
    pub family: Family,
    /// Margin added to cosine for matches and subtracted for non-matches.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Mine difficult pairs and retrain after the first convergence.
    #[arg(long)]
    pub refine: bool,
    /// Balanced pairs drawn for training.
    #[arg(long, default_value_t = 20_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub min_delta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub mined_cap: f64,
    #[arg(long, default_value_t = 200)]
    pub pool: usize,
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MineArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub pool: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mined pairs as JSON lines.
    #[arg(long)]
    pub out: PathBuf,
}

/// `cosine`, `euclid`, `linear:PATH` or `simnet:PATH`.
#[derive(Clone, Debug, PartialEq)]
pub enum ScorerSpec {
    Cosine,
    Euclid,
    Linear(PathBuf),
    Simnet(PathBuf),
}

impl FromStr for ScorerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "cosine" => Ok(ScorerSpec::Cosine),
            None if s == "euclid" => Ok(ScorerSpec::Euclid),
            Some(("linear", p)) if !p.is_empty() => Ok(ScorerSpec::Linear(p.into())),
            Some(("simnet", p)) if !p.is_empty() => Ok(ScorerSpec::Simnet(p.into())),
            _ => Err(format!("unknown scorer '{s}' (expected cosine, euclid, linear:PATH or simnet:PATH)")),
        }
    }
}

impl std::fmt::Display for ScorerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScorerSpec::Cosine => f.write_str("cosine"),
            ScorerSpec::Euclid => f.write_str("euclid"),
            ScorerSpec::Linear(p) => write!(f, "linear:{}", p.display()),
            ScorerSpec::Simnet(p) => write!(f, "simnet:{}", p.display()),
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long)]
    pub scorer: ScorerSpec,
    /// Per-query AP as JSON lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub store: StoreArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub scorers: Vec<ScorerSpec>,
    /// Per-query AP of every scorer as JSON lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
}
