//! Dense tensors and tape-based reverse-mode differentiation.

pub mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{fd_step, grad_check, BlockReport, GradCheckReport, GRAD_FLOOR};
pub use tape::{sigmoid, DropoutKey, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;
