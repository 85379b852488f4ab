use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("unsupported trace format version {found:?} (supported: {supported:?})")]
    VersionUnsupported { found: String, supported: &'static str },

    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate saliency map (zero variance)")]
    DegenerateSaliency,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid last-k {k} for a {layers}-layer trace")]
    InvalidK { k: usize, layers: usize },

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("malformed oracle response: {0}")]
    OracleMalformed(String),

    #[error("i/o failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
