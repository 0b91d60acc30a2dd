//! Dense `f32` tensors with a tape-based reverse-mode autodiff, just large
//! enough for a small autoregressive policy network.

pub mod check;
pub mod checkpoint;
mod error;
mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::TensorError;
pub use params::{Grads, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
