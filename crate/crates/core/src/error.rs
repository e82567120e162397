use std::path::PathBuf;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// No alignment of the requested length can produce the labels, or the
    /// pinned slots of a partial alignment rule every completion out.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Brute-force enumeration would exceed the oracle size cap.
    #[error("oracle scale exceeded: {count} alignments (cap {cap})")]
    OracleScale { count: u128, cap: u128 },

    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. a backward pass fed a cache from a different forward.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
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

/// Checkpoint loading failures. Each variant has a distinct numeric code.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
}

impl CheckpointError {
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::Corrupt(_) => 1,
            CheckpointError::Version { .. } => 2,
            CheckpointError::Shape(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
