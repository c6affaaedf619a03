//! `radd`: verification, training, sampling, evaluation and expected-NFE sweeps.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 numeric failure at run time.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use radd::{Backend, LossKind, RaddError, SamplingMethod};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    VerifyFailed,
}

impl From<RaddError> for CliError {
    fn from(e: RaddError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "radd",
    version,
    about = "Absorbing discrete diffusion at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the enumeration-based identity suite.
    Verify(VerifyArgs),
    /// Train a tabular or neural conditional model.
    Train(TrainArgs),
    /// Generate sequences from a model.
    Sample(SampleArgs),
    /// Perplexity and sample-quality report.
    Eval(EvalArgs),
    /// Analytic and empirical expected model calls over a step-count sweep.
    Enfe(EnfeArgs),
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Relative perturbation of the concrete-score scalar (negative control).
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub perturb_score: f64,
}

#[derive(Args, Default)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Joint-table JSON to use as data.
    #[arg(long, conflicts_with = "corpus")]
    pub table: Option<PathBuf>,
    /// Byte corpus to use as data (needs --d).
    #[arg(long, requires = "d")]
    pub corpus: Option<PathBuf>,
    /// Block length for --corpus.
    #[arg(long)]
    pub d: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave the wallclock column empty so metrics depend only on config and seed.
    #[arg(long)]
    pub no_wallclock: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long)]
    pub method: Option<SamplingMethod>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub cache: Option<Switch>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trajectories: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Monte-Carlo draws per example instead of exact enumeration.
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub max_examples: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EnfeArgs {
    /// Schedule source; other sections are ignored.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Numbers of masked positions, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8,64")]
    pub lengths: Vec<usize>,
    /// Step counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,8,32,128")]
    pub steps: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "tweedie")]
    pub methods: Vec<SamplingMethod>,
    #[arg(long, default_value_t = 10_000)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Oracle,
    Uniform,
    Tabular,
    Neural,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Oracle => Backend::Oracle,
            BackendArg::Uniform => Backend::Uniform,
            BackendArg::Tabular => Backend::Tabular,
            BackendArg::Neural => Backend::Neural,
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RADD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "RADD_THREADS must be a positive integer, got '{raw}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Verify(a) => commands::verify(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Enfe(a) => commands::enfe(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::VerifyFailed) => ExitCode::from(1),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
