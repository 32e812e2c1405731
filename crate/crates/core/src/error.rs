use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("non-numeric cell `{value}` in column `{column}` (row {row})")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("missing mandatory value in column `{column}` (row {row})")]
    MissingMandatory { column: String, row: usize },

    #[error("treatment column is constant")]
    ConstantTreatment,

    #[error("invalid treatment value {0}; expected -1/+1 or 0/1")]
    InvalidTreatment(f64),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("column {0} has zero variance")]
    ZeroVariance(String),

    #[error("perfect separation suspected (max |coef| = {max_coef:.2}); consider a ridge penalty")]
    Separation { max_coef: f64 },

    #[error("{what} did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("GMM did not converge: |g|_inf = {moment_norm:.3e}, objective = {objective:.3e}")]
    GmmNonConvergence { moment_norm: f64, objective: f64 },

    #[error("singular matrix in {0}; increase the ridge")]
    Singular(&'static str),

    #[error("rank-deficient design; offending columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("full balance function requires an outcome model")]
    MissingOutcomeModel,

    #[error("predictive column {column} has {observed} observed rows, need at least {required}")]
    InsufficientObserved {
        column: String,
        observed: usize,
        required: usize,
    },

    #[error("dataset has no predictive covariates")]
    NoPredictive,

    #[error("{failed} of {total} replicates failed")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("every candidate rule evaluation failed")]
    SearchFailed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
