use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SdmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SdmError {
    #[error("cannot initialize catalog at {path}: {source}")]
    Init {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("catalog table {file} is corrupt at line {line}: {reason}")]
    CatalogCorrupt {
        file: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("history file {path} is corrupt: {reason}")]
    HistoryCorrupt { path: PathBuf, reason: String },

    #[error("history write to {path} failed: {reason}")]
    HistoryWrite { path: PathBuf, reason: String },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("lifecycle violation: {0}")]
    Lifecycle(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("{path}: requested bytes [{offset}, {end}) but file holds {len}")]
    Bounds {
        path: PathBuf,
        offset: u64,
        end: u64,
        len: u64,
    },

    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),

    #[error("deadlock: rank {rank} is waiting in collective #{seq} but rank {exited} has exited")]
    Deadlock { rank: usize, seq: u64, exited: usize },

    #[error("rank {rank} failed: {message}")]
    RankFailed { rank: usize, message: String },

    #[error("verification mismatch: {0}")]
    Verification(String),
}

impl SdmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        SdmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors that originate from a peer's failure rather than this rank's own work.
    pub fn is_secondary(&self) -> bool {
        matches!(self, SdmError::Deadlock { .. })
    }
}
