//! Trigger-set watermarking of feature-extractor networks.
//!
//! A binary message is embedded into the representations of noisy trigger
//! images by jointly training the backbone with a small encoder and decoder.
//! Ownership of a suspect backbone is then decided by extracting messages
//! under fresh noise and comparing their Hamming distances against a
//! calibrated threshold, with concentration and Poisson-binomial bounds on
//! both error probabilities.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod bounds;
pub mod error;
pub mod harness;
pub mod nn;
pub mod oracles;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod watermark;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = nn::Matrix<f64>;
pub type Mlp = nn::MlpNetwork<f64>;
pub type Mlp32 = nn::MlpNetwork<f32>;
pub type Gradients64 = nn::Gradients<f64>;
pub type Bundle = watermark::ModelBundle<f64>;
