//! Command-line front end for lpflow experiments.

pub mod commands;
pub mod config;
pub mod output;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use config::{parse_config, ConfigError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "lpflow", version, about = "Linear Poincaré flow experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-time exponents of the Poincaré cocycle at sampled points.
    Exponents(Common),
    /// m-domination scan of candidate splittings.
    Domination {
        #[command(flatten)]
        common: Common,
        /// Also write the per-mark map of ratios above 1/2.
        #[arg(long)]
        map: bool,
    },
    /// Per-point zero-exponent / dominated / unresolved classification.
    Classify(Common),
    /// Monte Carlo LE_k sequence and its subadditivity checks.
    LeK(Common),
    /// Build a perturbation plan and its certificate.
    Perturb {
        #[arg(value_enum)]
        mode: PerturbMode,
        #[command(flatten)]
        common: Common,
    },
    /// Re-verify a saved plan file.
    Replay {
        path: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Flowbox measure distortion under radius halving.
    Flowbox(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PerturbMode {
    Exchange,
    Local,
}

/// Options shared by all subcommands; each one overrides the same key of
/// the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long)]
    pub cocycle: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub past: Option<usize>,
    #[arg(long)]
    pub future: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub kappa_lambda: Option<f64>,
    #[arg(long)]
    pub j_max: Option<usize>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub flow_time: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Defaults to $LPFLOW_OUTPUT_DIR, then `lpflow-out`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Core(lpflow::error::Error),
    Io(String),
    Verification(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    /// 1 for invalid input, 2 for numerical failures, 3 for failed
    /// verification.
    pub fn exit_code(&self) -> i32 {
        use lpflow::error::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Core(E::Parse { .. } | E::InvalidInput(_)) => 1,
            CliError::Core(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
            CliError::Verification(e) => write!(f, "verification failed: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<lpflow::error::Error> for CliError {
    fn from(e: lpflow::error::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

/// Effective configuration: file values, then flag overrides, then range
/// checks.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let src = match &common.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?),
        None => None,
    };
    let mut cfg = match &src {
        Some(s) => parse_config(s)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &common.$field {
                cfg.$field = v.clone();
            })*
        };
    }
    set!(model, seed, horizon, step, samples, m_grid, k, past, future, epsilon, kappa, delta, kappa_lambda, j_max,
        radius, flow_time);
    if common.model_file.is_some() {
        cfg.model_file = common.model_file.clone();
    }
    if common.cocycle.is_some() {
        cfg.cocycle = common.cocycle.clone();
    }
    if common.m.is_some() {
        cfg.m = common.m;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    if common.output_dir.is_some() {
        cfg.output_dir = common.output_dir.clone();
    }
    cfg.validate(src.as_deref())?;
    Ok(cfg)
}

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os(output::OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(output::DEFAULT_OUTPUT_DIR))
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
