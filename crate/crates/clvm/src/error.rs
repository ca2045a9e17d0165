use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum ClvmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric: max asymmetry {max_asym:.3e} exceeds tolerance {tol:.3e}")]
    NotSymmetric { max_asym: f64, tol: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("conditioning failed: {0}")]
    Conditioning(String),

    #[error("integration did not converge: {0}")]
    Integration(String),

    #[error("parse error at row {row}: {msg}")]
    ParseRow { row: usize, msg: String },

    #[error("parse error at row {row}, column {col}: {msg}")]
    ParseCell { row: usize, col: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing data present: {0}")]
    MissingData(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ClvmError>;
