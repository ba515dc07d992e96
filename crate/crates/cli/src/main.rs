//! `sepfx`: separable direct and indirect effects from the command line.
//!
//! Exit codes: 0 success, 1 output I/O failure, 2 bad arguments or input data,
//! 3 estimation failure. Errors are written to stderr as one JSON object.

mod estimate;
mod output;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sepfx_core::inference::Estimator;
use sepfx_core::simulation::ScenarioId;
use sepfx_core::Estimand;

#[derive(Debug, Parser)]
#[command(name = "sepfx", version, about = "Separable effects for competing-risks data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the working models and estimate direct and indirect effects.
    Estimate(estimate::EstimateArgs),
    /// Run a replication study on a simulated scenario.
    Simulate(simulate::SimulateArgs),
    /// Per-arm cumulative incidence curves for both causes.
    Cif(estimate::CifArgs),
}

/// Input file, column mapping and working-model choices.
#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "time")]
    pub time_col: String,
    /// Event column coded 0 = censored, 1 = cause 1, 2 = cause 2.
    #[arg(long, default_value = "event")]
    pub event_col: String,
    #[arg(long, default_value = "treatment")]
    pub treat_col: String,
    /// Covariate columns to read; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    pub covars: Option<Vec<String>>,
    /// Covariates of the cause-1 hazard model (default: all read covariates).
    #[arg(long, value_delimiter = ',')]
    pub cause1_covars: Option<Vec<String>>,
    /// Covariates of the cause-2 hazard model (default: all read covariates).
    #[arg(long, value_delimiter = ',')]
    pub cause2_covars: Option<Vec<String>>,
    /// `fit` for a logistic model, or `known:<p>` for a fixed P(A=1).
    #[arg(long, default_value = "fit", value_parser = parse_propensity)]
    pub propensity: PropensityMode,
    /// Covariates of the logistic propensity model (default: all read covariates).
    #[arg(long, value_delimiter = ',')]
    pub propensity_covars: Option<Vec<String>>,
    /// Covariates of the censoring hazard model, which always includes treatment.
    #[arg(long, value_delimiter = ',')]
    pub censor_covars: Vec<String>,
}

/// Seed, parallelism and output location shared by every command.
#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Worker threads (default: one per core). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value = "sepfx-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    Fit,
    Known(f64),
}

fn parse_propensity(s: &str) -> Result<PropensityMode, String> {
    if s == "fit" {
        return Ok(PropensityMode::Fit);
    }
    let p = s
        .strip_prefix("known:")
        .ok_or_else(|| format!("expected `fit` or `known:<p>`, got `{s}`"))?;
    match p.parse::<f64>() {
        Ok(p) if p > 0.0 && p < 1.0 => Ok(PropensityMode::Known(p)),
        _ => Err(format!("known propensity must be a number in (0,1), got `{p}`")),
    }
}

pub fn parse_times(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(t) if t.is_finite() && t >= 0.0 => Ok(t),
        _ => Err(format!("time must be a finite nonnegative number, got `{s}`")),
    }
}

pub fn parse_estimator(s: &str) -> Result<Estimator, String> {
    Estimator::from_str(s.trim()).map_err(|e| e.to_string())
}

pub fn parse_effect(s: &str) -> Result<Estimand, String> {
    Estimand::from_str(s.trim()).map_err(|e| e.to_string())
}

pub fn parse_scenario(s: &str) -> Result<ScenarioId, String> {
    ScenarioId::from_str(s.trim()).map_err(|e| e.to_string())
}

/// A failed run: exit code, short machine-readable kind and message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn output(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Failure {
            code: 1,
            kind: "output",
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<sepfx_core::Error> for Failure {
    fn from(err: sepfx_core::Error) -> Self {
        use sepfx_core::Error as E;
        let (code, kind) = match &err {
            E::Io(_) | E::Csv(_) => (2, "input"),
            E::Schema { .. } | E::Parse { .. } => (2, "input"),
            E::EmptyDataset | E::InvalidDataset(_) => (2, "input"),
            E::InvalidArgument(_) => (2, "usage"),
            E::DegenerateFit { .. } | E::NonConvergence { .. } | E::Singular { .. } => (3, "fit"),
            E::Positivity { .. } => (3, "positivity"),
            E::TmleNonConvergence { .. } | E::FluctuationRoot { .. } => (3, "tmle"),
            E::TooManyFailures { .. } => (3, "replication"),
            E::Unsupported(_) | E::State(_) => (3, "estimation"),
        };
        Failure {
            code,
            kind,
            message: err.to_string(),
        }
    }
}

/// Strictly increasing check on a user-supplied grid.
pub fn check_grid(times: &[f64]) -> Result<(), Failure> {
    if times.is_empty() {
        return Err(Failure::usage("--times needs at least one value"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Failure::usage("--times must be strictly increasing"));
    }
    Ok(())
}

fn init_threads(run: &RunArgs) -> Result<(), Failure> {
    if let Some(n) = run.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(args) => init_threads(&args.run).and_then(|_| estimate::run_estimate(args)),
        Command::Simulate(args) => init_threads(&args.run).and_then(|_| simulate::run(args)),
        Command::Cif(args) => init_threads(&args.run).and_then(|_| estimate::run_cif(args)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let body = serde_json::json!({ "error": { "kind": f.kind, "message": f.message } });
            eprintln!("{body}");
            ExitCode::from(f.code)
        }
    }
}
