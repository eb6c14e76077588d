//! Minimal dense tensor kernels with hand-written backward passes.

mod ops;
mod params;
mod tensor;

pub use ops::*;
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;
