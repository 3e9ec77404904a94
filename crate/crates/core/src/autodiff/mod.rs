//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every operation appends a node to a [`Tape`]; [`Tape::backward`] walks the
//! tape once in reverse. A tape is single-threaded; independent tapes may be
//! built on different workers.

mod check;
mod conv;
mod tape;
mod tensor;

pub use check::{gradient_check, gradient_check_many};
pub use tape::{ConvPadding, Gradients, PadMode, Tape, Var};
pub use tensor::Tensor;
