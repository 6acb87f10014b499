// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type and `Result` alias.

/// Errors produced by sinklab operations.
///
/// The CLI maps these onto process exit codes: config/argument problems
/// exit 2, weight-file schema problems exit 3, numeric failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every entry of a softmax row was masked to negative infinity.
    #[error("softmax over a fully masked row")]
    DegenerateRow,

    /// A direction vector required to be nonzero had zero norm.
    #[error("zero-norm direction")]
    ZeroDirection,

    /// Pearson correlation of a constant sequence.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// Weight file violates the on-disk schema.
    #[error("weight schema: {0}")]
    Schema(String),

    /// A forward pass produced a non-finite intermediate value.
    #[error("non-finite value at layer {layer}{}: {detail}", head_suffix(.head))]
    NonFinite {
        layer: usize,
        head: Option<usize>,
        detail: String,
    },

    /// A decode cache does not match the model it is used with.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// Run configuration is inconsistent.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn head_suffix(head: &Option<usize>) -> String {
    match head {
        Some(h) => format!(", head {h}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
