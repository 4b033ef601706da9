use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the latency models, fitters, simulator and file readers.
#[derive(Debug, Error)]
pub enum Error {
    /// The requested load is at or beyond the model's saturation rate.
    #[error("load {rps} rps is beyond saturation (latency diverges at 1/c2 = {saturation_rps} rps)")]
    Stability { rps: f64, saturation_rps: f64 },

    /// A saturation rate was requested for a model with no load-dependent cost.
    #[error("model has no load-dependent cost; saturation rate is unbounded")]
    Unbounded,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Every draft length saturates at the requested load.
    #[error("no draft length in 0..={k_max} is stable at {rps} rps")]
    NoStableConfig { rps: f64, k_max: u32 },

    /// The MoE fixed-point equation has no root with a positive denominator.
    #[error("no stable fixed point at {rps} rps: {reason}")]
    NoStableSolution { rps: f64, reason: String },

    #[error("singular jacobian: {0}")]
    SingularJacobian(String),

    #[error("fit did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported document: {0}")]
    Version(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
