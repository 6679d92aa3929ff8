//! Command-line front end: dataset generation, training, verification,
//! analytics, tabular DPO, the selection study and the `ρ₀` sweep.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | internal or training failure |
//! | 2 | usage error: unknown flag, bad value, invalid configuration |
//! | 3 | I/O error, including missing input files |
//! | 4 | a verification tolerance was not met |
//! | 5 | malformed or incompatible input file |

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod manifest;
pub mod svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TOLERANCE: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;

/// Default root for output directories when `--out` is not given.
pub const OUT_DIR_ENV: &str = "ADAPREF_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Tolerance(String),
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Lib(#[from] adapref::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use adapref::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Format(_) | CliError::Csv(_) => EXIT_FORMAT,
            CliError::Tolerance(_) => EXIT_TOLERANCE,
            CliError::Other(_) => EXIT_FAILURE,
            CliError::Lib(e) => match e {
                E::InvalidConfig(_) | E::InvalidInput(_) | E::TauOutOfRange { .. } => EXIT_USAGE,
                E::Io(_) => EXIT_IO,
                E::Parse { .. } | E::Format(_) | E::Json(_) | E::DimensionMismatch { .. } => {
                    EXIT_FORMAT
                }
                _ => EXIT_FAILURE,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "adapref",
    version,
    about = "Preference-based reward learning with adaptive preference scaling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic preference dataset.
    GenData(GenDataArgs),
    /// Train a reward model on a dataset.
    Train(TrainArgs),
    /// Run oracle verification suites.
    Verify(VerifyArgs),
    /// Emit CSV tables and SVG plots from a training report.
    Analyze(AnalyzeArgs),
    /// Train a tabular policy with DPO or adaptive DPO.
    Dpo(DpoArgs),
    /// Compare hyperparameter selection by return and by accuracy on a bandit.
    AlignStudy(AlignStudyArgs),
    /// Train the adaptive loss over a list of rho0 values.
    SweepRho(SweepRhoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelModeArg {
    Deterministic,
    Stochastic,
}

impl From<LabelModeArg> for adapref::data::LabelMode {
    fn from(m: LabelModeArg) -> Self {
        match m {
            LabelModeArg::Deterministic => Self::Deterministic,
            LabelModeArg::Stochastic => Self::Stochastic,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long = "seg-len", default_value_t = 1)]
    pub seg_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long = "label-mode", value_enum, default_value_t = LabelModeArg::Deterministic)]
    pub label_mode: LabelModeArg,
    /// Scale of the stochastic labeller.
    #[arg(long = "noise-scale", default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the ground-truth reward; defaults to `--seed`.
    #[arg(long = "gt-seed")]
    pub gt_seed: Option<u64>,
    #[arg(long = "train-fraction", default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Width of a two-layer ground truth; linear when omitted.
    #[arg(long = "gt-hidden")]
    pub gt_hidden: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    AdaLin,
    AdaQuad,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchArg {
    Linear,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Tanh,
    Relu,
}

/// Loss and optimizer flags shared by `train`, `dpo` and `sweep-rho`.
#[derive(Debug, Clone, Args)]
pub struct LossArgs {
    #[arg(long, value_enum, default_value_t = LossArg::AdaLin)]
    pub loss: LossArg,
    #[arg(long, default_value_t = adapref::loss::DEFAULT_TAU0)]
    pub tau0: f64,
    /// Upper bound of the scaling factor for the linear kind (default 5).
    /// The quadratic kind is unbounded and rejects this flag.
    #[arg(long = "tau-max")]
    pub tau_max: Option<f64>,
    #[arg(long, default_value_t = adapref::loss::DEFAULT_RHO0)]
    pub rho0: f64,
    #[arg(long = "hinge-margin", default_value_t = adapref::loss::DEFAULT_HINGE_MARGIN)]
    pub hinge_margin: f64,
    #[arg(long = "newton-iters", default_value_t = 3)]
    pub newton_iters: usize,
    /// Start each scaling-factor solve from the previous solution.
    #[arg(long = "warm-start")]
    pub warm_start: bool,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (train.jsonl, optional test.jsonl) or a single dataset file.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ArchArg::Mlp2)]
    pub arch: ArchArg,
    #[arg(long, default_value_t = adapref::model::Architecture::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Tanh)]
    pub activation: ActivationArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Duality,
    Prop1,
    Prop2,
    Newton,
    Gradcheck,
    Reparam,
    All,
}

impl From<SuiteArg> for adapref::verify::Suite {
    fn from(s: SuiteArg) -> Self {
        use adapref::verify::Suite;
        match s {
            SuiteArg::Duality => Suite::Duality,
            SuiteArg::Prop1 => Suite::Prop1,
            SuiteArg::Prop2 => Suite::Prop2,
            SuiteArg::Newton => Suite::Newton,
            SuiteArg::Gradcheck => Suite::Gradcheck,
            SuiteArg::Reparam => Suite::Reparam,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    pub suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the results as JSON to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// A report.json written by `train`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
    /// Bins of the scaling-factor histogram.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct DpoArgs {
    /// DPO dataset (JSONL). Generated from a planted reward table when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Reference policy checkpoint; uniform when omitted.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub states: usize,
    #[arg(long, default_value_t = 6)]
    pub actions: usize,
    #[arg(long, default_value_t = 400)]
    pub pairs: usize,
    #[arg(long = "label-mode", value_enum, default_value_t = LabelModeArg::Deterministic)]
    pub label_mode: LabelModeArg,
    #[arg(long = "noise-scale", default_value_t = 1.0)]
    pub noise_scale: f64,
    #[arg(long = "data-seed", default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignStudyArgs {
    /// JSON grid (base training config, losses, learning rates, epochs).
    /// The built-in twelve-configuration grid is used when omitted.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long = "env-seed", default_value_t = 0)]
    pub env_seed: u64,
    /// Number of seeds, numbered from `--first-seed`.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long = "first-seed", default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = adapref::bandit::DEFAULT_CANDIDATES)]
    pub candidates: usize,
    #[arg(long = "eval-contexts", default_value_t = adapref::bandit::DEFAULT_EVAL_CONTEXTS)]
    pub eval_contexts: usize,
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long = "label-mode", value_enum, default_value_t = LabelModeArg::Stochastic)]
    pub label_mode: LabelModeArg,
    #[arg(long = "noise-scale", default_value_t = 10.0)]
    pub noise_scale: f64,
    /// Width of the two-layer ground truth; 0 for a linear one.
    #[arg(long = "gt-hidden", default_value_t = 16)]
    pub gt_hidden: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepRhoArgs {
    /// Comma-separated rho0 values.
    #[arg(long = "rho0-list", value_delimiter = ',', required = true)]
    pub rho0_list: Vec<f64>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = adapref::loss::DEFAULT_TAU0)]
    pub tau0: f64,
    #[arg(long = "tau-max", default_value_t = adapref::loss::DEFAULT_TAU_MAX)]
    pub tau_max: f64,
    #[arg(long = "newton-iters", default_value_t = 3)]
    pub newton_iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ArchArg::Mlp2)]
    pub arch: ArchArg,
    #[arg(long, default_value_t = adapref::model::Architecture::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolves `--out`, falling back to `$ADAPREF_OUT_DIR/<name>` and then
/// `runs/<name>`.
pub fn output_dir(explicit: Option<&Path>, name: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name),
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
