//! Frequency-aware memory encoder for a frozen diffusion transformer, with the
//! supporting codec, sampler, steering and retrieval machinery.

pub mod autograd;
pub mod blob;
pub mod config;
pub mod diffusion;
pub mod dit_backbone;
pub mod error;
pub mod freq_filter;
pub mod hashing;
pub mod latent_codec;
pub mod memory_encoder;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod retrieval_bank;
pub mod rng;
pub mod steering;
pub mod synthetic;

pub use error::{Error, Result};
