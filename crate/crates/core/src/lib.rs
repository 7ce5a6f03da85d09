//! Patch-based diffusion restoration for single-channel thermal images.
//!
//! The pipeline: a [`LinearOperator`](degrade::LinearOperator) describes how
//! a clean image was degraded, a [`Denoiser`](denoiser::Denoiser) trained on
//! small clean tiles predicts noise, and [`restore`](guidance::restore)
//! runs the reverse diffusion over an overlapping tiling while pulling each
//! estimate back towards the measurement.

pub mod degrade;
pub mod dense;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod image;
pub mod io;
pub mod metrics;
pub mod patch;
pub mod rng;
pub mod scene;

pub use error::{Error, Result};
pub use image::{ThermalImage, ValueDomain};
pub use rng::SeededRng;
