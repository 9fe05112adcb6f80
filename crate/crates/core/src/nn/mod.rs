//! Minimal CPU convolutional-network engine (f64, single-sample passes).

mod gemm;
pub mod layer;
pub mod network;
pub mod optim;
pub mod tensor;

pub use layer::{Layer, Padding, Window};
pub use network::{
    cross_entropy, reinitialize, softmax, ArchBuilder, Architecture, Gradients, Network, ParamGroup, ParamId, ParamKind,
    ParamSpec, SampleLoss,
};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Shape, Tensor};

#[cfg(test)]
mod tests;
