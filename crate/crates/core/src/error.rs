use thiserror::Error;

/// Errors raised while loading data, fitting working models or estimating effects.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{column}` in input header")]
    Schema { column: String },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("degenerate {model} fit: {reason}")]
    DegenerateFit { model: String, reason: String },

    #[error("{model} failed to converge after {iterations} iterations (score sup-norm {score_norm:.3e})")]
    NonConvergence {
        model: String,
        iterations: usize,
        score_norm: f64,
    },

    #[error("{model}: singular information matrix at iteration {iteration}")]
    Singular { model: String, iteration: usize },

    #[error("positivity violation: {quantity} = {value:.3e} at time {time}")]
    Positivity {
        quantity: &'static str,
        value: f64,
        time: f64,
    },

    #[error("TMLE did not converge in {iterations} iterations; gamma trajectory {trajectory:?}")]
    TmleNonConvergence {
        iterations: usize,
        trajectory: Vec<f64>,
    },

    #[error("fluctuation equation has no root on [{lo}, {hi}]")]
    FluctuationRoot { lo: f64, hi: f64 },

    #[error("{failed} of {total} {what} failed (limit {limit_pct}%)")]
    TooManyFailures {
        what: &'static str,
        failed: usize,
        total: usize,
        limit_pct: u32,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("state error: {0}")]
    State(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
