//! Continuous diffusion over token embeddings with adaptive early exit.
//!
//! The core is generic over the floating point type; the `*32`/`*64`
//! aliases below pin it for callers that do not care.

pub mod ar;
pub mod checkpoint;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod halting;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod trace;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type ArModel32 = ar::ArModel<f32>;
pub type ArModel64 = ar::ArModel<f64>;
pub type EmbeddingTable32 = diffusion::EmbeddingTable<f32>;
pub type EmbeddingTable64 = diffusion::EmbeddingTable<f64>;
