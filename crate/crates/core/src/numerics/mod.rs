//! Tensor engine: dense row-major tensors, a reverse-mode tape, and the
//! central-difference gradient oracle.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;


pub use gradcheck::{finite_diff_check, primitive_gradient_errors};
pub use tape::{Tape, Var};
pub use tensor::{Float, Tensor};
