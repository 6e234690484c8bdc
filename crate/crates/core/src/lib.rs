//! Tuning-free long-video generation from a short-clip latent diffusion model.

pub mod config;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod eval;
pub mod export;
pub mod latent;
pub mod latfile;
pub mod schedule;
pub mod world;

pub use error::{Error, Result};
