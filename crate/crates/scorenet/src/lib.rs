//! Two-stage region-recommending vision transformer with semantic mixing
//! augmentation, plus a small training/evaluation/benchmark harness and CLI.
//!
//! The pipeline: a low-resolution scorer transformer turns an image into a
//! semantic distribution over its patch grid; a differentiable top-K layer
//! selects the most informative regions; a fine-grained local transformer
//! embeds each selected high-resolution patch; a coarse-grained transformer
//! aggregates those embeddings; a linear head classifies the concatenated
//! summary tokens. The same semantic distribution drives a mixing
//! augmentation that cuts semantically dense regions from one image and
//! pastes them over the least dense regions of another.

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod infer;
pub mod model;
pub mod numerics;
pub mod scoremix;
pub mod semantic;
pub mod tiler;
pub mod topk;

pub use error::{Error, Result};
