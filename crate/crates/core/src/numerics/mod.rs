//! Dense tensors, reverse-mode differentiation and log-domain primitives.

pub mod btc1;
pub mod gradcheck;
pub mod graph;
pub mod logspace;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use btc1::{StoredTensor, TensorFile};
pub use graph::{Gradients, Graph, Var};
pub use logspace::{log_add, logsumexp, softmax_log};
pub use optim::{adam_step, AdamConfig, AdamState, NoamSchedule};
pub use rng::{Rng, SeedStream};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
