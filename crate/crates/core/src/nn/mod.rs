//! Dense network engine: matrices, MLPs with backpropagation, AdamW,
//! global magnitude pruning, finite-difference checking and checkpoints.

mod activation;
pub mod checkpoint;
mod gradcheck;
mod matrix;
mod mlp;
mod optim;
mod prune;

pub use activation::{sigmoid, Activation};
pub use gradcheck::{gradient_check, gradient_check_flat, DEFAULT_FLOOR};
pub use matrix::Matrix;
pub use mlp::{Backprop, Gradients, Layer, LayerGradient, MlpNetwork, MlpSpec, Trace};
pub use optim::{AdamConfig, OptimizerState};
pub use prune::{l1_unstructured_prune, prune_count};
