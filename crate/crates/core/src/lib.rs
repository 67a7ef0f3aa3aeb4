//! Linearity probes and layer surgery for small transformer, MLP and CNN
//! models.
//!
//! The crate trains desk-scale models from scratch, measures how close each
//! block is to an affine map (cosine-fitted linear approximators corrected
//! for embedding anisotropy), and runs structural interventions on trained
//! models: removing or linearizing blocks, swapping, shuffling and repeating
//! layers.

pub mod data;
pub mod error;
pub mod harness;
pub mod linearity;
pub mod models;
pub mod rng;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
