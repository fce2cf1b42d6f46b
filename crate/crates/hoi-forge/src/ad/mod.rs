//! Reverse-mode autodiff, neural layers, optimizer, and checkpoints.

pub mod checkpoint;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use nn::{ParamId, ParamStore};
pub use optim::AdamW;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
