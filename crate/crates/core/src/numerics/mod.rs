//! Tensors, randomness, reverse-mode gradients, and optimizers.

pub mod blob;
mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Adam, Bound, ParamSet};
pub use rng::{gaussian, Rng};
pub use tensor::Tensor;
