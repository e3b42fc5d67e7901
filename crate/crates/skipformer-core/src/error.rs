//! Crate-wide error type.
//!
//! Variants are grouped by what the caller can do about them: `Policy`,
//! `Config`, `Range`, and `Calibration` are rejected inputs (the CLI maps
//! them to exit code 1), while `Format`, `Io`, `Capacity`, and `Internal`
//! indicate a broken artifact or a violated invariant (exit code 2).

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for a kernel or block operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A compute policy that cannot be resolved into a schedule.
    #[error("invalid policy: {0}")]
    Policy(String),

    /// A model configuration that fails validation.
    #[error("invalid model config: {0}")]
    Config(String),

    /// An index (token id, position, layer) outside its valid range.
    #[error("out of range: {0}")]
    Range(String),

    /// A serialized artifact that violates its format contract. `context`
    /// names the offending tensor or field where one is known.
    #[error("format error in {path}: {context}")]
    Format { path: String, context: String },

    /// Sequence grew past the model's position-embedding table.
    #[error("context capacity exceeded: {0}")]
    Capacity(String),

    /// Calibration could not produce usable statistics.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// An execution trace that does not cover what a consumer needs.
    #[error("invalid trace: {0}")]
    Trace(String),

    /// An internal invariant was violated; always a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    /// Filesystem failure while reading or writing an artifact.
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Helper for shape errors: `Error::shape("matmul", format!(...))`.
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Helper for format errors tagged with the offending file and tensor.
    pub fn format(path: impl Into<String>, context: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            context: context.into(),
        }
    }

    /// Helper for io errors tagged with the path that failed.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
