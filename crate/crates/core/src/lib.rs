//! Desk-scale masked-autoencoder pipeline for histopathology-style imagery.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`tensor`]: dense f32 tensors, reverse-mode autodiff, AdamW.
//! - [`vit`]: the ViT masked autoencoder (patching, masking, encoder/decoder).
//! - [`corpus`]: random-crop corpus generation from slide images.
//! - [`probe`]: frozen-embedding extraction and linear/MLP probes.
//! - [`eval`]: classification metrics, the repeated-run protocol, and t-SNE.
//! - [`checkpoint`] / [`config`]: bit-exact persistence and run configuration.
//!
//! Everything is deterministic: a fixed seed and config produce bit-identical
//! corpora, checkpoints, embeddings, and reports, independent of thread count.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod util;
pub mod vit;

pub use error::{Error, Result};
