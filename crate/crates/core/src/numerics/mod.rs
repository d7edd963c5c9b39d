//! Dense tensors, a reverse-mode gradient tape, and the numerical checks
//! that everything else is trained with.

mod adjacency;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
mod ops;
mod params;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use adjacency::Adjacency;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use gradcheck::{central_differences, check_gradients, max_relative_error, op_suite};
pub use ops::softmax_in_place;
pub use params::{Binder, Gradients, Param, ParamId, ParamStore, SparseGrads};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Default LeakyReLU negative slope.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
