use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {file} at byte offset {offset}: {reason}")]
    Format {
        file: String,
        offset: u64,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch at layer {layer} ({kind}): expected {expected:?}, got {got:?}")]
    Shape {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("calibration failed: no {0} Round-1 decisions")]
    Calibration(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
