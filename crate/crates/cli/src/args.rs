use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Noise-contrastive estimation experiments on finite conditional models.
///
/// All logarithms are natural; perplexities use base e.
#[derive(Debug, Parser)]
#[command(name = "nce-lab", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a ground-truth problem file.
    Synth(SynthArgs),
    /// Draw a dataset of positives and negatives from a problem.
    Sample(SampleArgs),
    /// Fit an estimator and evaluate it against the problem's truth.
    Fit(FitArgs),
    /// Population maximizers of both objectives on the two-input counterexample.
    Counterexample(CounterexampleArgs),
    /// Asymptotic covariances and efficiency-rate curves over K.
    Asymptotics(AsymptoticsArgs),
    /// Repeated fits compared with the asymptotic covariance.
    Replicate(ReplicateArgs),
    /// Train a log-bilinear n-gram language model.
    Lm(LmArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Sample(_) => "sample",
            Command::Fit(_) => "fit",
            Command::Counterexample(_) => "counterexample",
            Command::Asymptotics(_) => "asymptotics",
            Command::Replicate(_) => "replicate",
            Command::Lm(_) => "lm",
        }
    }

    pub fn out(&self) -> &PathBuf {
        match self {
            Command::Synth(a) => &a.out,
            Command::Sample(a) => &a.out,
            Command::Fit(a) => &a.out,
            Command::Counterexample(a) => &a.out,
            Command::Asymptotics(a) => &a.out,
            Command::Replicate(a) => &a.out,
            Command::Lm(a) => &a.out,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    /// Linear-softmax model on Gaussian-mixture inputs, uniform p_X.
    Synthetic,
    /// Linear-features model with random features and p_X.
    Tabular,
    /// Linear-features model with a constant partition function.
    SelfNormalized,
    /// The two-input, two-label counterexample.
    Counterexample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorArg {
    Mle,
    Ranking,
    Binary,
}

impl EstimatorArg {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorArg::Mle => "mle",
            EstimatorArg::Ranking => "ranking",
            EstimatorArg::Binary => "binary",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub kind: ProblemKind,
    /// Feature dimension.
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    #[arg(long = "m-x", default_value_t = 200)]
    pub m_x: usize,
    #[arg(long = "m-y", default_value_t = 100)]
    pub m_y: usize,
    /// Standard deviation of θ* for tabular and self-normalized problems.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long = "K", default_value_t = 4)]
    pub k: usize,
    /// uniform, unigram or unigram-pow:<p> (label marginal raised to p).
    #[arg(long, default_value = "uniform")]
    pub noise: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitFlags {
    /// Bounds of the normalizer γ for binary fits, as lo:hi.
    #[arg(long = "gamma-range", default_value = "-30:30", allow_hyphen_values = true)]
    pub gamma_range: String,
    #[arg(long = "max-iters", default_value_t = 5000)]
    pub max_iters: usize,
    /// Gradient-norm tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// Existing dataset; drawn from the problem with --n when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ranking")]
    pub estimator: EstimatorArg,
    #[arg(long = "K", default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value = "uniform")]
    pub noise: String,
    /// Add a free bias c_x per input.
    #[arg(long = "context-bias")]
    pub context_bias: bool,
    #[arg(long = "reg-alpha", default_value_t = 0.0)]
    pub reg_alpha: f64,
    #[arg(long = "reg-m", default_value_t = 10)]
    pub reg_m: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CounterexampleArgs {
    /// Comma-separated values of K.
    #[arg(long = "K", default_value = "1,2,5,10")]
    pub k: String,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AsymptoticsArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, value_enum, default_value = "ranking")]
    pub estimator: EstimatorArg,
    /// Comma-separated values of K.
    #[arg(long = "K", default_value = "1,2,4,8")]
    pub k: String,
    #[arg(long, default_value = "uniform")]
    pub noise: String,
    /// exact, or mc:<M> for M sampled negative tuples.
    #[arg(long, default_value = "exact")]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplicateArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, value_enum, default_value = "mle")]
    pub estimator: EstimatorArg,
    #[arg(long = "K", default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value = "uniform")]
    pub noise: String,
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 300)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub fit: FitFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct LmArgs {
    /// UTF-8 text, one sentence per line; the bundled toy corpus when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// n-gram order (2 = bigram).
    #[arg(long, default_value_t = 2)]
    pub order: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, value_enum, default_value = "ranking")]
    pub estimator: EstimatorArg,
    #[arg(long = "K", default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value = "unigram")]
    pub noise: String,
    /// Keep the per-context bias c_x (zero and frozen otherwise).
    #[arg(long = "context-bias")]
    pub context_bias: bool,
    #[arg(long = "reg-alpha", default_value_t = 0.0)]
    pub reg_alpha: f64,
    /// Noise draws per example for the regularizer; a tenth of the
    /// vocabulary when absent.
    #[arg(long = "reg-m")]
    pub reg_m: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long = "batch-size", default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    /// Learning rate at epoch e is lr / (1 + decay·e).
    #[arg(long, default_value_t = 0.1)]
    pub decay: f64,
    /// Words seen fewer times in training map to <unk>.
    #[arg(long = "min-count", default_value_t = 1)]
    pub min_count: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}
