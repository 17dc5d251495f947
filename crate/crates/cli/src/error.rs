use std::path::PathBuf;

use facekp::model::weights::WeightError;

use crate::pnm::PnmError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: PnmError },
    #[error("{path}: {source}")]
    Detect {
        path: PathBuf,
        source: facekp::Error,
    },
    #[error("{path}: {source}")]
    Weights { path: PathBuf, source: WeightError },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid value for {flag}: {message}")]
    Flag { flag: &'static str, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image keys without ground truth in {path}: {}", keys.join(", "))]
    UnmatchedImages { path: PathBuf, keys: Vec<String> },
    #[error("all {0} images failed")]
    AllFailed(usize),
    #[error(transparent)]
    Core(#[from] facekp::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
