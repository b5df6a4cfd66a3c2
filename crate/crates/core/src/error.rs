// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Model,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("failed to load weights: {0}")]
    Load(String),

    #[error("context overflow: {len} tokens exceeds the maximum of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("unknown hook `{name}` (valid forms: blocks.<layer>.hook_resid_post, blocks.<layer>.attn.hook_z)")]
    UnknownHook { name: String },

    #[error("hook `{name}` is out of range for a model with {n_layers} layers")]
    HookOutOfRange { name: String, n_layers: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("single-class data: {0}")]
    SingleClass(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("invalid artifact: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Tagged {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Wrap with a context label (e.g. the failing hook name).
    pub fn tagged(self, context: impl Into<String>) -> Self {
        Error::Tagged {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape(_)
            | Error::Load(_)
            | Error::ContextOverflow { .. }
            | Error::HookOutOfRange { .. } => ErrorKind::Model,
            Error::UnknownHook { .. } | Error::Domain(_) => ErrorKind::Usage,
            Error::NonFinite(_) | Error::DegenerateData(_) => ErrorKind::Numeric,
            Error::EmptyInput(_)
            | Error::Parse { .. }
            | Error::EmptyDataset
            | Error::Stratification(_)
            | Error::SingleClass(_)
            | Error::InsufficientData(_)
            | Error::Invalid(_)
            | Error::Io { .. }
            | Error::Json { .. } => ErrorKind::Data,
            Error::Tagged { source, .. } => source.kind(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
