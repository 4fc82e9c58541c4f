use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied an argument outside the operation's domain of inputs
    /// (token out of range, shape mismatch, empty corpus, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A logarithm or division would be evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Non-finite value produced inside the denoiser.
    #[error("numeric error in layer {layer}: {what}")]
    NumericLayer { layer: usize, what: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged.
    #[error("training diverged at step {step}{}", last_good.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Diverged { step: usize, last_good: Option<PathBuf> },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: tensor `{name}` expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures that stem from bad numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::NumericLayer { .. } | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
