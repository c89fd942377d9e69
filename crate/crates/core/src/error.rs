use std::path::PathBuf;

/// Errors produced across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, lengths or indices that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// An operation invoked in the wrong lifecycle state (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),

    /// Malformed input file.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    /// Invalid configuration; `keys` lists every offending key path.
    #[error("config error: {msg} (keys: {})", keys.join(", "))]
    Config { msg: String, keys: Vec<String> },

    /// Synthetic scene generation could not satisfy its recipe.
    #[error("generation error: {0}")]
    Generation(String),

    /// Non-finite values during optimization.
    #[error("numeric failure at batch {batch}: {msg}")]
    Numeric { batch: usize, msg: String },

    /// Artifact written by a different toolkit version.
    #[error("version mismatch: artifact {found}, toolkit {expected}")]
    Version { expected: String, found: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }
}
