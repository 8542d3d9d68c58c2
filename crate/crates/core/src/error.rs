use thiserror::Error;

#[derive(Debug, Error)]
pub enum KpzError {
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("operator (1 - K) is near singular, det = {det:e}")]
    Singular { det: f64 },
    #[error("consistency check failed: {0}")]
    Consistency(String),
    #[error("insufficient statistics: {0}")]
    Statistics(String),
    #[error("unsupported parameter: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KpzError>;
