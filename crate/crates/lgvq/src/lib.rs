//! Language-guided codebook learning on a vector-quantized autoencoder.
//!
//! The crate trains a convolutional encoder/decoder with a discrete codebook
//! and aligns the codebook with frozen text embeddings through three
//! auxiliary objectives: a global semantic alignment term, masked word
//! prediction from code tokens, and word-relation transfer onto matched
//! codes. Everything runs in sequential f64 so identical seeds give
//! bit-identical runs.

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diag;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod params;
pub mod relation;
pub mod rngs;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
