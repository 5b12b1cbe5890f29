//! Reverse-mode automatic differentiation over dense double-precision tensors,
//! plus the Adam optimizer and the checkpoint format.

mod adam;
pub mod checkpoint;
mod ops;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use ops::ConvGeom;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
