//! Coarse-grained force fields learned from equilibrium samples with a
//! denoising diffusion model.

pub mod analysis;
pub mod dataio;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod sampler;
pub mod schedule;
pub mod scorenet;
pub mod tape;
pub mod toyworlds;
pub mod trainer;

pub use error::{DffError, Result};
