use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate vector: norm {norm:e} is not above {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("expected a unit-norm vector, got norm {norm}")]
    NotUnitNorm { norm: f64 },

    #[error("index {index} out of range 0..{len} ({what})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("non-finite or negative value in `{term}`: {value}")]
    Numeric { term: String, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("PNG codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

/// Coarse failure classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, or input documents that failed to parse or validate.
    Config,
    /// Synthetic data generation could not satisfy its constraints.
    Generation,
    /// A numeric fail-fast (NaN, infinity, collapsed embedding).
    Numeric,
    /// File system or image codec failure.
    Io,
    /// Programming errors such as shape mismatches.
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Validation(_) => ErrorKind::Config,
            Error::Generation(_) => ErrorKind::Generation,
            Error::Numeric { .. } | Error::DegenerateVector { .. } | Error::NotUnitNorm { .. } => {
                ErrorKind::Numeric
            }
            Error::Json { .. } => ErrorKind::Config,
            Error::Io { .. } | Error::Image { .. } => ErrorKind::Io,
            Error::Shape(_) | Error::Index { .. } | Error::OutOfBounds(_) => ErrorKind::Internal,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
