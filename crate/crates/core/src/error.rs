use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error in {name}: {detail}")]
    Numeric { name: String, detail: String },

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integrity error: checksum mismatch for {}", path.display())]
    Integrity { path: PathBuf },

    #[error("manifest mismatch: checkpoint expects {expected}, dataset has {found}")]
    ManifestMismatch { expected: String, found: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {}: {detail}", path.display())]
    Image { path: PathBuf, detail: String },

    #[error("provider error ({provider}): {detail}")]
    Provider { provider: String, detail: String },

    #[error("failed to parse provider response: {detail}")]
    Parse { detail: String, raw_body: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            name: name.into(),
            detail: detail.into(),
        }
    }
}
