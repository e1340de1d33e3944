//! Dense `f64` tensors, a reverse-mode gradient tape, Adam with warm-up and
//! a named-tensor checkpoint format.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use tape::{broadcast_shape, Gradients, Tape, Var};
pub use tensor::Tensor;
