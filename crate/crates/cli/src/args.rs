use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scs_core::LossKind;

#[derive(Debug, Parser)]
#[command(name = "scs-supcon", version, about = "Supervised contrastive experiments on synthetic and CSV data")]
pub struct Cli {
    /// Only log errors.
    #[arg(long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic content/style dataset.
    Generate(GenerateArgs),
    /// Two-stage training on a CSV dataset.
    Train(TrainArgs),
    /// Accuracy as a function of the style weight β.
    SweepBeta(SweepArgs),
    /// Random search over (t0, b0, β) on a validation split.
    Search(SearchArgs),
    /// Average ranks, Friedman test, Nemenyi CD and paired t-tests.
    Stats(StatsArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON spec file, or a preset name (easy, fine-grained).
    #[arg(long)]
    pub spec: String,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// JSON training config.
    #[arg(long)]
    pub config: PathBuf,
    /// CSV dataset with a `label` column.
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of each class held out as the test split.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also run k-fold cross-validation on the whole dataset.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated β values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub betas: Vec<f64>,
    /// Number of seeds per β, counted up from the config's seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 30)]
    pub trials: usize,
    /// JSON search space; defaults to t0 ∈ [0.05, 0.2], b0 ∈ [-0.2, 0.2], β ∈ [1e-5, 1e-1].
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Seed of the trial sampler; defaults to the config's seed.
    #[arg(long)]
    pub search_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum UnitArg {
    Fraction,
    Percent,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Accuracy matrix: first column method name, header row trial names.
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Accuracy unit; inferred from the values when omitted.
    #[arg(long, value_enum)]
    pub unit: Option<UnitArg>,
    /// Run paired t-tests of this method against every other one.
    #[arg(long)]
    pub proposed: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Loss to check; all three when omitted.
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Random instances per loss.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Skip the encoder + projection stack.
    #[arg(long)]
    pub no_stack: bool,
    /// Perturbs the analytic gradients before comparison.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}
