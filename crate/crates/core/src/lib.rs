//! Personalized federated mixture-of-experts classification with a
//! test-time defense: a masked autoencoder flags suspicious inputs and a
//! denoising diffusion model purifies them before classification.

pub mod attack;
pub mod classifier;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod federation;
pub mod harness;
pub mod mae;
pub mod moe;
pub mod nn;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
