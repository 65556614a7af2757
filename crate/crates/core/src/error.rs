use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("shape error at layer {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: usize,
        expected: String,
        actual: String,
    },

    #[error("bias policy violated: {0}")]
    Policy(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unsupported fusion: {0}")]
    UnsupportedFusion(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("layer {index}: {source}")]
    AtLayer {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable category, used by the CLI's `error:<category>:` prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Geometry(_) => "geometry",
            Error::Value(_) => "value",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Shape { .. } => "shape",
            Error::Policy(_) => "policy",
            Error::Precondition(_) => "precondition",
            Error::UnsupportedFusion(_) => "unsupported_fusion",
            Error::Invariant(_) => "invariant",
            Error::Io { .. } => "io",
            Error::AtLayer { source, .. } => source.category(),
        }
    }

    /// Innermost error with any layer context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtLayer { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn at_layer(self, index: usize) -> Error {
        match self {
            // keep the innermost index
            e @ Error::AtLayer { .. } => e,
            e @ Error::Shape { .. } => e,
            e => Error::AtLayer {
                index,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
