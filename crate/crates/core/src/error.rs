use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tau {tau} outside the denoising interval [{lo}, {hi}]")]
    Domain { tau: f64, lo: f64, hi: f64 },
    #[error("degenerate grid: adjacent times {0} and {1} coincide")]
    DegenerateGrid(f64, f64),
    #[error("unknown environment `{id}` (known: {known})")]
    UnknownEnv { id: String, known: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error("environment failure at step {step}: {reason}")]
    Env { step: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
