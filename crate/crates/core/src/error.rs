use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every stage of the patch pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Placement produces an unusable quadrilateral (edge-on, behind the camera, tiny area).
    #[error("degenerate placement: {0}")]
    DegeneratePlacement(String),

    /// Patch or texture element too small to optimize meaningfully.
    #[error("patch too small: {0}")]
    PatchTooSmall(String),

    /// An argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    /// Patch cannot be placed into the scene (fully or mostly outside the frame).
    #[error("deployment error: {0}")]
    Deployment(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// Loss or gradient became NaN/inf.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("serialization error: {0}")]
    Serde(String),

    /// Wraps another error with scene / step context.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the root cause is a numerical failure (CLI exit code 2).
    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
