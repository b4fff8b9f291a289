use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use curemark::prediction::SummaryKind;

#[derive(Debug, Parser)]
#[command(name = "curemark", version, about = "Model-based landmarking for mixture cure models")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate simulated datasets for one scenario.
    Simulate(SimulateArgs),
    /// Fit a landmark cure model and write it as JSON.
    Fit(FitArgs),
    /// Predict survival for a dataset from a fitted model.
    Predict(PredictArgs),
    /// Score fitted models or stored predictions.
    Evaluate(EvaluateArgs),
    /// Run the Monte Carlo comparison of summary strategies.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=12))]
    pub scenario: u32,
    /// Subjects per replicate.
    #[arg(long, default_value_t = 300)]
    pub m: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub replicates: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Also write the independent validation set to `rep-<k>/validation/`.
    #[arg(long)]
    pub with_validation: bool,
}

/// Input files and covariate roles shared by commands that read data.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub longitudinal: PathBuf,
    #[arg(long)]
    pub subjects: PathBuf,
    /// Subject columns used as incidence covariates (default: columns named x*).
    #[arg(long, value_delimiter = ',')]
    pub incidence_cols: Option<Vec<String>>,
    /// Subject columns used as latency covariates (default: columns named z*).
    #[arg(long, value_delimiter = ',')]
    pub latency_cols: Option<Vec<String>>,
    /// Longitudinal covariates to summarize (default: all).
    #[arg(long, value_delimiter = ',')]
    pub longitudinal_cols: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub landmark: f64,
    #[arg(long, value_parser = parse_kind)]
    pub summary: SummaryKind,
    #[arg(long, default_value = "fit.json")]
    pub out: PathBuf,
    /// EM iteration limit.
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// EM relative convergence tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Prediction horizons in study time, after the landmark.
    #[arg(long, value_delimiter = ',', required = true)]
    pub horizons: Vec<f64>,
    #[arg(long, default_value = "predictions.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fitted models to score; each gives one labelled block.
    #[arg(long, conflicts_with = "predictions", required_unless_present_any = ["predictions", "cv"])]
    pub fit: Vec<PathBuf>,
    /// Stored prediction CSV scored against `--subjects`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub longitudinal: Option<PathBuf>,
    #[arg(long)]
    pub subjects: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub incidence_cols: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub latency_cols: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub longitudinal_cols: Option<Vec<String>>,
    /// Landmark time; required with `--predictions` or `--cv`.
    #[arg(long)]
    pub landmark: Option<f64>,
    /// Evaluation grid in study time (default: 10 points up to the 90th
    /// percentile of follow-up).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Repeated cross-validation: FOLDS REPEATS.
    #[arg(long, num_args = 0..=2, value_names = ["FOLDS", "REPEATS"])]
    pub cv: Option<Vec<usize>>,
    /// Strategies compared in cross-validation.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "locf,blup")]
    pub strategies: Vec<SummaryKind>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSON configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u32).range(1..=12))]
    pub scenarios: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',')]
    pub sample_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub strategies: Option<Vec<SummaryKind>>,
    /// Post-landmark evaluation grid.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "CUREMARK_JOBS")]
    pub jobs: Option<usize>,
}

fn parse_kind(s: &str) -> Result<SummaryKind, String> {
    s.parse::<SummaryKind>().map_err(|e| e.to_string())
}
