//! The `st-align` command line: synthesize data, train, predict, evaluate,
//! run ablations and check gradients.
//!
//! Every subcommand is also callable as a function so the pipeline can be
//! driven from tests without spawning processes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use st_align_core::pipeline::Ablation;
use st_align_core::retrieval::Weighting;
use st_align_core::train::{LossTerm, Stage};

pub mod commands;
pub mod manifest;

pub use commands::{ablate, eval, gradcheck, predict, synth, train};
pub use manifest::RunManifest;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ST_ALIGN_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or parameters. Exit code 1.
    Validation(String),
    /// Failure while reading data or running. Exit code 2.
    Runtime(String),
    Core(st_align_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        use st_align_core::Error as E;
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Core(E::Parameter(_) | E::Config(_) | E::Usage(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid arguments: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<st_align_core::Error> for CliError {
    fn from(e: st_align_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "st-align", version, about = "Predict spatial gene expression from histology features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic slide with a planted shared latent field.
    Synth(SynthArgs),
    /// Preprocess training slides and fit both encoders.
    Train(TrainArgs),
    /// Impute expression for an image-only query slide.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Train the baseline and models A to D and tabulate their scores.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 800)]
    pub spots: usize,
    #[arg(long, default_value_t = 200)]
    pub genes: usize,
    #[arg(long = "img-features", default_value_t = 30)]
    pub img_features: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// square or hex
    #[arg(long, default_value = "square")]
    pub grid: String,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    /// Also write `train/` and `query/` splits, holding out the last N spots
    /// (a contiguous strip of the grid) as the query.
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
}

/// Config sources shared by the commands that train.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long = "train-dirs", value_delimiter = ',', num_args = 1.., required = true)]
    pub train_dirs: Vec<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Model file; history and manifest are written next to it.
    #[arg(long = "out-model")]
    pub out_model: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Slides with expression forming the reference database.
    #[arg(long = "db-dirs", value_delimiter = ',', num_args = 1.., required = true)]
    pub db_dirs: Vec<PathBuf>,
    #[arg(long = "query-dir")]
    pub query_dir: PathBuf,
    /// Neighbors per query; defaults to the model's `topk`.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, default_value = "uniform")]
    pub weighting: Weighting,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the query's normalized expression of the predicted genes,
    /// when the query slide has expression.
    #[arg(long = "truth-out")]
    pub truth_out: Option<PathBuf>,
    /// Persist the reference database to this directory.
    #[arg(long = "save-db")]
    pub save_db: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Marker genes; the default layer markers when omitted.
    #[arg(long, value_delimiter = ',')]
    pub markers: Option<Vec<String>>,
    #[arg(long = "out-report")]
    pub out_report: PathBuf,
    /// Genes to map, as `gene=G1,G2` or `G1,G2`.
    #[arg(long = "emit-maps")]
    pub emit_maps: Option<String>,
    /// Coordinates for the maps; defaults to `coords.csv` beside the truth file.
    #[arg(long)]
    pub coords: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long = "train-dirs", value_delimiter = ',', num_args = 1.., required = true)]
    pub train_dirs: Vec<PathBuf>,
    #[arg(long = "query-dir")]
    pub query_dir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "uniform")]
    pub weighting: Weighting,
    #[arg(long, value_delimiter = ',')]
    pub markers: Option<Vec<String>>,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub sweep: u64,
    /// A single term; every term plus the combined objective when omitted.
    #[arg(long)]
    pub term: Option<LossTerm>,
    /// Perturb the analytic gradient of this parameter block.
    #[arg(long)]
    pub corrupt: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Objective weights from a config file instead of the defaults.
    #[command(flatten)]
    pub config: ConfigArgs,
}

/// Worker cap from the environment; 1 when unset.
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Validation(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let threads = threads_from_env()?;
    match cli.command {
        Command::Synth(a) => synth(&a, threads).map(drop),
        Command::Train(a) => train(&a, threads).map(drop),
        Command::Predict(a) => predict(&a, threads).map(drop),
        Command::Eval(a) => eval(&a, threads).map(drop),
        Command::Ablate(a) => ablate(&a, threads).map(drop),
        Command::Gradcheck(a) => {
            let out = gradcheck(&a)?;
            if out.iter().all(|r| r.passed) {
                Ok(())
            } else {
                Err(CliError::Validation("gradient check failed".into()))
            }
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
