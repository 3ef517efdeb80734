use std::time::Duration;

/// Errors raised by the engine and its building blocks.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance matrix is not positive definite even with jitter {max_jitter:e} on the diagonal")]
    SingularCovariance { max_jitter: f64 },

    #[error("ensemble sampler is stuck: acceptance rate {acceptance_rate:.4} is below {threshold}")]
    DegenerateSampling { acceptance_rate: f64, threshold: f64 },

    #[error("inner surrogate fit failed on every restart")]
    DegenerateFit,

    #[error("black-box evaluation failed: {0}")]
    Evaluation(#[from] EvalError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Failure modes of a single black-box evaluation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("could not spawn `{command}`: {reason}")]
    Spawn { command: String, reason: String },

    #[error("`{command}` did not answer within {timeout:?}")]
    Timeout { command: String, timeout: Duration },

    #[error("`{command}` exited with status {status}: {stderr}")]
    ExitStatus {
        command: String,
        status: String,
        stderr: String,
    },

    #[error("could not parse a number from output {output:?}")]
    Parse { output: String },

    #[error("input {0:?} is outside the function's domain")]
    Domain(Vec<f64>),

    #[error("non-finite response {value} at {x:?}")]
    NonFinite { x: Vec<f64>, value: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
