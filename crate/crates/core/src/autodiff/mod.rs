//! Tape-based reverse-mode differentiation over `f32` tensors.
//!
//! Only the operations the vision transformer and the receptive-field
//! analysis need are provided. Broadcasting is limited to scalar-and-tensor
//! pairs; model code reshapes and tiles explicitly.

mod op;
mod session;
mod tape;
mod tensor;

pub use op::OpKind;
pub use session::Session;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
