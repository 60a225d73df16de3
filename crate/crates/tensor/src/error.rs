/// Errors raised by tensor construction and tape operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    /// Two operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has a shape the operation cannot accept.
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// An API contract was violated (e.g. backward on a non-scalar).
    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
