//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor argument violated its contract. `field` names the
    /// offending parameter.
    #[error("invalid {field}: {message}")]
    InvalidArgument { field: &'static str, message: String },

    /// A requested statistical property cannot be represented on the grid
    /// (for example a correlation length below two grid pitches).
    #[error("sampling: {0}")]
    Sampling(String),

    /// Two objects that must share a grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// An estimator was finalized with too few records.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Accumulators with different scan-position layouts were combined.
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    /// Beam support violates the windowing guard before or during propagation.
    #[error("windowing: {0}")]
    Windowing(String),

    /// Config file problem tied to a specific line.
    #[error("{path}:{line}: {message}")]
    Config { path: String, line: usize, message: String },

    /// Config file problem not tied to a line (missing file, empty, ...).
    #[error("config {path}: {message}")]
    ConfigFile { path: String, message: String },

    /// Scenario name not in the registry.
    #[error("unknown scenario '{name}'; registered scenarios: {registered}")]
    UnknownScenario { name: String, registered: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument { field, message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
