//! `mvtt`: phantom generation, training, inference, baselines and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod manifest;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mvtt::baselines::Method;
use mvtt::network::ModelVariant;
use mvtt::train::DecaySchedule;

#[derive(Debug, Parser)]
#[command(name = "mvtt", version, about = "Joint LA/PV and atrial scar segmentation on synthetic LGE-like volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Phantom(PhantomArgs),
    /// Train a model variant, with cross-validation when --folds > 1.
    Train(TrainArgs),
    /// Predict probabilities, masks and overlays for volumes.
    Infer(InferArgs),
    /// Run the unsupervised scar baselines on a dataset.
    Baselines(BaselineArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Number of volumes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    /// Cube side in voxels; a positive multiple of 8.
    #[arg(long, default_value_t = 32, value_parser = parse_size)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Folds recorded in the dataset manifest [default: min(10, count)].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Built-in template used when --spec is absent.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// JSON phantom template; --size, --seed and --noise override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Record wall-clock timestamps in run.json (makes it non-reproducible).
    #[arg(long)]
    pub timestamps: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `mvtt phantom`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<ModelVariant>,
    /// JSON training configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// 1 trains on every volume and reports on the training set.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr_initial: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    #[arg(long, value_parser = parse_decay)]
    pub decay: Option<DecaySchedule>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub timestamps: bool,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Volume file; repeat for several.
    #[arg(long, required = true)]
    pub volume: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub timestamps: bool,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Directory of labelled volumes.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2sd,kmeans,fcm", value_parser = parse_method)]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub out: PathBuf,
    /// Wall shell radius in voxels.
    #[arg(long, default_value_t = mvtt::baselines::DEFAULT_WALL_RADIUS)]
    pub wall_radius: f64,
    /// Take the LA/PV masks that define the wall from this directory
    /// (matched by file stem) instead of the ground truth.
    #[arg(long)]
    pub la_masks: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub n_sd: f64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub timestamps: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted volumes (masks), e.g. from `mvtt infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth volumes.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = mvtt::baselines::DEFAULT_WALL_RADIUS)]
    pub wall_radius: f64,
    #[arg(long)]
    pub timestamps: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Few large scar patches, low noise.
    Desk,
    /// Many small scar patches (about 5% of the wall), heavy noise.
    Speckle,
}

fn parse_size(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n == 0 || n % 8 != 0 {
        return Err(format!(
            "size must be a positive multiple of 8 (the network pools three times), got {n}"
        ));
    }
    Ok(n)
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: mvtt::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: mvtt::Error| e.to_string())
}

fn parse_decay(s: &str) -> Result<DecaySchedule, String> {
    match s {
        "exponential" => Ok(DecaySchedule::Exponential),
        "linear" => Ok(DecaySchedule::Linear),
        _ => Err(format!("unknown decay {s:?}; expected exponential or linear")),
    }
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<mvtt::Error> for Failure {
    fn from(e: mvtt::Error) -> Self {
        match e {
            mvtt::Error::Config(_) | mvtt::Error::Infeasible(_) => Failure::Usage(e.to_string()),
            mvtt::Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Baselines(a) => commands::baselines(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
