//! Learned channel surrogates for end-to-end channel coding.
//!
//! An autoencoder codec is trained through a differentiable stand-in for the
//! physical channel: either the true simulator (model-aware), a conditional
//! denoising diffusion model, or a conditional Wasserstein GAN. The surrogate
//! and the codec are trained alternately, then evaluated by symbol error rate
//! on the real channel.

pub mod autoencoder;
pub mod channels;
pub mod diffusion;
pub mod eval;
pub mod harness;
pub mod numkit;
pub mod rng;
pub mod trainer;
pub mod wgan;

mod error;

pub use error::{Error, Result};
