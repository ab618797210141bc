use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("target column `{0}` not found")]
    MissingTarget(String),

    #[error("target not binary: {0}")]
    TargetNotBinary(String),

    #[error("too few rows: {0} survive ingestion, need at least 2")]
    TooFewRows(usize),

    #[error("feature `{0}` has zero variance on the training rows")]
    ZeroVariance(String),

    #[error("infeasible split: {train} + {test} rows requested from {available}")]
    InfeasibleSplit {
        train: usize,
        test: usize,
        available: usize,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid index: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value during optimization at iteration {iteration}: {what}")]
    NonFinite { iteration: usize, what: String },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("lasso did not converge after {sweeps} sweeps (max KKT violation {kkt_violation:e})")]
    LassoNonConvergence { sweeps: usize, kkt_violation: f64 },

    #[error("stratified folds impossible: {0}")]
    Folds(String),

    #[error("single-class targets: both classes are required")]
    SingleClass,

    #[error("model format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
