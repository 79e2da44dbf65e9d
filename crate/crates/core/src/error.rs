use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("could not parse response: {message}")]
    Parse { message: String, raw: String },

    #[error("response gives no {class} attribute for `{item}`")]
    MissingAttribute {
        item: String,
        class: crate::safety_spec::ObservabilityClass,
        raw: String,
    },

    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("validation error at record {record}: {message}")]
    Validation { record: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(message: impl Into<String>, raw: impl Into<String>) -> Self {
        Error::Parse {
            message: message.into(),
            raw: raw.into(),
        }
    }

    pub(crate) fn backend(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag, used by the CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Parse { .. } | Error::MissingAttribute { .. } => "parse-error",
            Error::Backend { .. } => "backend-error",
            Error::Input(_) => "input-error",
            Error::Domain(_) => "domain-error",
            Error::Numeric(_) => "numeric-error",
            Error::Validation { .. } => "validation-error",
            Error::Config(_) => "config-error",
            Error::Io { .. } => "io-error",
            Error::Json(_) => "json-error",
        }
    }
}
