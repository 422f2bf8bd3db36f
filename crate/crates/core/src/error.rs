use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("station {station} out of range for a {n}-station network")]
    StationOutOfRange { station: usize, n: usize },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("invalid weights file: {0}")]
    Weights(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("not enough samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Parse(_) => "parse",
            Error::StationOutOfRange { .. } => "station_out_of_range",
            Error::InvalidAction(_) => "invalid_action",
            Error::Weights(_) => "weights",
            Error::Diverged(_) => "diverged",
            Error::Schema(_) => "schema",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
