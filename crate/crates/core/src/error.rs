//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Each variant maps to one error category so CLI
/// callers can emit a machine-parseable `category=` summary.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or configuration mismatch (names the offending dimensions).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid graph construction (asymmetry, negative weights, zero-degree node).
    #[error("graph construction error: {0}")]
    Graph(String),

    /// Tensor shape mismatch at an operation boundary.
    #[error("shape error: {0}")]
    Shape(String),

    /// Operation called in the wrong state (e.g. missing description store entry).
    #[error("state error: {0}")]
    State(String),

    /// Invalid argument value (out-of-range index, non-positive temperature, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// Scripted completion fixture has no entry for the requested key.
    #[error("fixture error: missing entry for {0}")]
    FixtureMiss(String),

    /// Live completion transport failed after the carried number of attempts.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// Corrupt transcript-cache record at the given 1-based line number.
    #[error("cache error at line {line}: {message}")]
    Cache { line: usize, message: String },

    /// On-disk container problem (bad magic, version mismatch, truncation) at a byte offset.
    #[error("format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Input that cannot be normalized or otherwise carries no signal.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A loss term became non-finite during training.
    #[error("non-finite loss term `{term}` at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    /// Stable category tag for machine-parseable error summaries.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Graph(_) => "graph",
            Error::Shape(_) => "shape",
            Error::State(_) => "state",
            Error::Argument(_) => "argument",
            Error::FixtureMiss(_) => "fixture",
            Error::Transport { .. } => "transport",
            Error::Cache { .. } => "cache",
            Error::Format { .. } => "format",
            Error::Degenerate(_) => "degenerate",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Io(_) => "io",
            Error::Serialization(_) => "serialization",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
