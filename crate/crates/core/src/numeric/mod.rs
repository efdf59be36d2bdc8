//! Dense tensors, reverse-mode differentiation and Adam.

pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{AdamConfig, Gradients, Group, Param, ParamId, ParameterStore};
pub use tape::{bce_value, Tape, Var};
pub use tensor::{sigmoid, softmax_into, Tensor};
