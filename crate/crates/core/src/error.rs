use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps `Usage` to exit code 1 and
/// everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("shape mismatch for {name}: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("parameter set mismatch; missing: [{}], unexpected: [{}]", missing.join(", "), unexpected.join(", "))]
    ParamMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
