use std::path::Path;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] advstyle_core::Error),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("manifest references missing file {0}")]
    MissingFile(String),

    #[error("mixed resolutions (expected {expected}): {}", offenders.join(", "))]
    MixedResolutions { expected: String, offenders: Vec<String> },

    #[error("could not parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("nothing to report in {0}")]
    NothingToReport(String),

    #[error("provider rejected credentials (HTTP {status})")]
    Auth { status: u16 },

    #[error("rate limit still exceeded after {attempts} attempts")]
    RateLimited { attempts: u32 },

    #[error("provider failed after {attempts} attempts: {last}")]
    Transient { attempts: u32, last: String },

    #[error("malformed provider response ({reason}): {body}")]
    Malformed { reason: String, body: String },

    #[error("environment variable {0} is not set")]
    MissingCredential(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
