//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The crate is generic over the scalar type: `f64` for the verification
//! suites, `f32` for training and inference. Values live in [`Tensor`]
//! buffers; differentiable computation is recorded on a [`Tape`] which hands
//! out [`Var`] handles and replays the graph in reverse for gradients.

mod error;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, TapeMark, Var};
pub use tensor::Tensor;

/// Single-precision aliases used by training and inference paths.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;

/// Double-precision aliases used by oracles and gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
