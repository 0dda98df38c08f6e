//! Dense tensors, parameters and a reverse-mode tape.

mod param;
mod tape;
mod tensor;

pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
