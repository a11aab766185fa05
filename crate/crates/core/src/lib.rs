//! Desk-scale laboratory for multimodal variational autoencoders.
//!
//! The crate provides, from the ground up: dense-tensor reverse-mode
//! autodiff, diagonal-Gaussian algebra with product/mixture posterior
//! aggregation, perceptron encoder/decoder models with per-modality
//! likelihoods, the full set of training objectives (multimodal evidence
//! bound, subset-mixture bound, posterior-alignment objective, iterative
//! refinement loss, distillation KL), a gated refinement network that
//! improves a unimodal posterior with gradients of the all-modality
//! objective, a two-stage Adam trainer, synthetic datasets with exact
//! posterior and entropy oracles, and the evaluation metrics reported by the
//! command-line runner.

pub mod error;
pub mod tensor;
pub mod graph;
pub mod rng;
pub mod gaussian;
pub mod model;
pub mod checkpoint;
pub mod objectives;
pub mod refiner;
pub mod optim;
pub mod trainer;
pub mod data;
pub mod eval;

pub use error::{Error, Result};
pub use tensor::Tensor;
