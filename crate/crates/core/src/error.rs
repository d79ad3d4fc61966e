use std::ops::Range;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its valid domain.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("sample range {range:?} is out of bounds for a trace of {len} samples")]
    Range { range: Range<usize>, len: usize },

    #[error("device `{device}` has no operation `{op}` (available: {available})")]
    UnknownOperation {
        device: String,
        op: String,
        available: String,
    },

    #[error("unknown device `{name}` (available: {available})")]
    UnknownDevice { name: String, available: String },

    /// The caller reported an observation that cannot happen.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("reports are not comparable: {0}")]
    Comparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
