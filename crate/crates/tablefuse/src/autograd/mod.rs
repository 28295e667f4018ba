//! Dense f64 tensor math with reverse-mode gradients, sized for desk-scale
//! models where gradient-check tightness matters more than throughput.

mod tape;
mod tensor;

pub use tape::{ContextBundle, Gradients, RelGrid, StackData, Tape, Var};
pub use tensor::Tensor;
