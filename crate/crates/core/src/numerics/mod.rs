//! Dense tensors, the differentiation tape and a finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use tape::{ConvGeometry, Tape, Var};
pub use tensor::{Scalar, Tensor};
