//! Dense float64 tensors and a tape-based reverse-mode differentiator.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad_check, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
