//! Minimal feed-forward network engine with manual backpropagation.

pub mod loss;
mod network;
pub mod optim;
mod tensor;

pub use network::{BnMode, Init, Layer, Network, Tape};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Shape3, Tensor};
