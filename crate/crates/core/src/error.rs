use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("adapter: {0}")]
    Adapter(String),

    #[error("invalid layer specification: {0}")]
    Freezing(String),

    #[error("zero variance input to {0}")]
    ZeroVariance(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("empty loader for task {0}")]
    EmptyLoader(&'static str),

    #[error("memory cap exceeded: peak {peak} bytes > cap {cap} bytes")]
    MemoryCap { peak: u64, cap: u64 },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("data {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, msg: msg.into() })
}
