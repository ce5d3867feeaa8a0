//! Transformer VQA model that scores every candidate answer with a decoder
//! over learnable answer embeddings.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode differentiation and a
//!   finite-difference gradient checker.
//! - [`nn`]: multi-head attention, feed-forward, encoder and decoder layers.
//! - [`model`]: toy image/question encoders, cross-modality attention fusion,
//!   the answer-querying decoder over learnable answer embeddings, and the
//!   asymmetric loss.
//! - [`data`]: a procedural grid-world VQA dataset and its text file format.
//! - [`train`]: Adam, the training loop, evaluation, checkpoints, and the
//!   ablation / answer-dimension sweep harnesses.

pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{no_grad, Parameter, Tensor};
