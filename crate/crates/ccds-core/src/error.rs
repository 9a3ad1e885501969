use thiserror::Error;

/// Errors shared across the estimation pipeline.
#[derive(Debug, Error)]
pub enum CcdsError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("validation failed:\n{0}")]
    Validation(String),

    #[error("rank-deficient design: {0}; set a positive ridge_penalty to regularize")]
    RankDeficient(String),

    #[error("single-class subset: {0}")]
    SingleClass(String),

    #[error(
        "IRLS did not converge after {iterations} iterations \
         (max coefficient change {last_change:.3e}, deviance {deviance:.6e})"
    )]
    NoConvergence {
        iterations: usize,
        last_change: f64,
        deviance: f64,
    },

    #[error("treatment level {level:?} absent from {stratum}")]
    MissingLevel { stratum: String, level: String },

    #[error("empty stratum {0}")]
    EmptyStratum(String),

    #[error("constant selection propensity: logit score range is zero")]
    ConstantPropensity,

    #[error("zero weight sum in IPW term {0}: no contributing units")]
    ZeroWeightSum(String),

    #[error("bootstrap instability: replicate failed after {redraws} redraws ({cause})")]
    BootstrapInstability { redraws: usize, cause: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("all ensemble members failed: {0}")]
    EnsembleFailed(String),
}

pub type Result<T> = std::result::Result<T, CcdsError>;
