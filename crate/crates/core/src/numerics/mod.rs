//! Dense tensors, the autodiff tape, and named parameter storage.

mod params;
mod tape;
mod tensor;

pub use params::{Bound, ParamId, ParamStore};
pub use tape::{gelu, Gradients, Tape, Var};
pub use tensor::Tensor;
