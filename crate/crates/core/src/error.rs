use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in field `{0}`")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("records not time-sorted: timestamp {t} at index {index} does not follow {previous}")]
    Unsorted { index: usize, t: f64, previous: f64 },

    #[error("location dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("dimension mismatch in residual block `{block}`: expected {expected}, got {got}")]
    BlockMismatch {
        block: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("kernel matrix not PSD (sigma_f = {sigma_f}, length_scale = {length_scale}, max jitter = {jitter:e})")]
    NotPsd {
        sigma_f: f64,
        length_scale: f64,
        jitter: f64,
    },

    #[error("matrix kernel requested for the SE-independent family; use se_cov per axis")]
    NotMatrixKernel,

    #[error("solver diverged: cost became non-finite after {iterations} iterations (last finite cost {last_cost})")]
    Diverged { iterations: usize, last_cost: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no magnetic measurements")]
    NoMagnetic,

    #[error("no magnetometer timestamp lies within half a period of an IMU epoch ({dropped} dropped)")]
    NoOverlap { dropped: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by bad user input, as opposed to numerical failures.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Diverged { .. } | Error::NotPsd { .. })
    }
}
