use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("idx file has wrong magic {found:#010x}, expected {expected:#010x}")]
    IdxMagic { expected: u32, found: u32 },
    #[error("idx file truncated: {0}")]
    IdxTruncated(String),
    #[error("idx sample count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("malformed parameter file: {0}")]
    ParamFormat(String),
    #[error("parse error in {path}: {message} at line {line}, column {column}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FedError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        FedError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration rather than a
    /// failure during execution.
    pub fn is_config(&self) -> bool {
        matches!(self, FedError::Config(_) | FedError::Parse { .. })
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            FedError::Shape { .. } => "shape",
            FedError::Config(_) => "config",
            FedError::Protocol(_) => "protocol",
            FedError::Runtime(_) => "runtime",
            FedError::IdxMagic { .. } => "idx_magic",
            FedError::IdxTruncated(_) => "idx_truncated",
            FedError::IdxCountMismatch { .. } => "idx_count_mismatch",
            FedError::ParamFormat(_) => "param_format",
            FedError::Parse { .. } => "parse",
            FedError::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, FedError>;
