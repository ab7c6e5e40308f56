use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed notebook: {0}")]
    MalformedNotebook(String),

    #[error("unsupported notebook format version {major}.{minor} (need >= 4)")]
    UnsupportedVersion { major: u64, minor: u64 },

    #[error("cell {0} is not a code cell")]
    NotACodeCell(usize),

    #[error("anchor line {line} out of range for cell {cell} ({len} lines)")]
    AnchorOutOfRange { cell: usize, line: usize, len: usize },

    #[error("catalog schema error: {0}")]
    CatalogSchema(String),

    #[error("instrumentation conflict: {0}")]
    InstrumentationConflict(String),

    #[error("executor unavailable: {0}")]
    ExecutorUnavailable(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("confidence must lie in (0, 1), got {0}")]
    Domain(f64),

    #[error("property {0} has no successful samples")]
    NoSamples(String),

    #[error("generation aborted: {failed} of {total} runs failed")]
    GenerationAborted { failed: usize, total: usize },

    #[error("operator {operator} inapplicable: {reason}")]
    OperatorInapplicable { operator: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn inapplicable(operator: impl ToString, reason: impl Into<String>) -> Self {
        Error::OperatorInapplicable {
            operator: operator.to_string(),
            reason: reason.into(),
        }
    }
}
