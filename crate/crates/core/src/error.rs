use std::path::PathBuf;

/// Every failure the library reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lambda = {lambda})")]
    NonFiniteLoss { epoch: usize, batch: usize, lambda: f64 },
    #[error("optimization did not converge: gradient norm {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
