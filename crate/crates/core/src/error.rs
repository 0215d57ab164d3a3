use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("parse error in {}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("detector is not calibrated")]
    Uncalibrated,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short identifier of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::OutOfRange { .. } => "out-of-range",
            Error::Parse { .. } => "parse",
            Error::Contract(_) => "contract",
            Error::Uncalibrated => "uncalibrated",
            Error::InsufficientData(_) => "insufficient-data",
            Error::MissingData(_) => "missing-data",
            Error::Solver(_) => "solver",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { what, expected, got })
        }
    }
}
