//! Posterior sampling for microscopy dehazing with guided conditional flow
//! matching.
//!
//! The crate simulates paired hazy/clean images, trains a small U-Net to
//! predict the flow velocity from noise to clean conditioned on the hazy
//! observation, draws posterior samples with a fixed-step Euler solver, and
//! calibrates the pixel-wise spread of those samples against the actual error.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

// NaN-rejecting guards are written `!(x > 0.0)`
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod optics;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod tiler;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use raster::Raster;
pub use scalar::Real;

pub type Raster32 = Raster<f32>;
pub type Raster64 = Raster<f64>;
pub type VelocityNet32 = net::VelocityNet<f32>;
pub type VelocityNet64 = net::VelocityNet<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type PosteriorSet32 = sampler::PosteriorSet<f32>;
pub type PosteriorSet64 = sampler::PosteriorSet<f64>;
pub type PairedSample32 = optics::PairedSample<f32>;
pub type PairedSample64 = optics::PairedSample<f64>;
