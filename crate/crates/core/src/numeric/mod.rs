//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
mod scalar;
pub mod tensor;

pub use graph::{AttnMask, AttnSpec, Gradients, Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{softmax, softmax_cross_entropy, Tensor};
