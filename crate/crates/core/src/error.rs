//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on a named axis.
    #[error("shape mismatch on axis `{axis}` in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A dictionary was paired with data of the wrong filter count.
    #[error("filter count mismatch: dictionary has K={expected}, got K={actual}")]
    FilterCountMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Negative soft-threshold level or non-positive sparsity map entry.
    #[error("invalid sparsity level: {0}")]
    InvalidSparsityLevel(String),

    /// The iterative solver blew past its divergence guard.
    #[error("solver diverged: objective {objective:.6e} exceeds 10x initial {initial:.6e}; step size too large")]
    Divergence { objective: f64, initial: f64 },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, sample {sample}, dictionary `{dict_key}`")]
    NonFiniteLoss {
        epoch: usize,
        sample: usize,
        dict_key: String,
    },

    /// Evaluation mask has no foreground pixels.
    #[error("evaluation mask is empty (all-background reference image)")]
    EmptyMask,

    /// Autodiff misuse: backward from a non-scalar or an id off the tape.
    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
