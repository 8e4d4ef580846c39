//! Dense tensors and reverse-mode automatic differentiation.

mod kernels;
mod tape;
mod tensor;

pub use tape::{moving_average, Padding, Tape, Unary, Var};
pub use tensor::Tensor;

