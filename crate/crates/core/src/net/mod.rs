//! Conditional velocity estimators.

mod adam;
mod ops;
mod params;
mod unet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Real;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use ops::{Conv2d, GroupNorm, Linear, Tensor, TIME_SCALE};
pub use params::{ParamEntry, ParamStore};
pub use unet::{VelocityNet, INFERENCE_CHUNK};

/// Anything that predicts `dx/dt` for a batch of states sharing one
/// conditioning observation.
pub trait VelocityModel<T: Real> {
    fn velocity_batch(&self, t: T, states: &[Raster<T>], cond: &Raster<T>) -> Result<Vec<Raster<T>>>;

    fn velocity(&self, t: T, state: &Raster<T>, cond: &Raster<T>) -> Result<Raster<T>> {
        let mut out = self.velocity_batch(t, std::slice::from_ref(state), cond)?;
        Ok(out.pop().expect("one output per state"))
    }
}

/// How the hazy observation enters the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Stack `x_t` and the observation as two input channels.
    #[default]
    Concat,
    /// Feed `x_t + observation` as a single channel.
    Add,
}

impl Conditioning {
    pub fn in_channels(self) -> usize {
        match self {
            Conditioning::Concat => 2,
            Conditioning::Add => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub base_channels: usize,
    /// Number of down/up-sampling levels.
    pub depth: usize,
    pub time_embed_dim: usize,
}

/// Upper bound on group-norm groups.
pub const NORM_GROUPS: usize = 8;

impl ArchSpec {
    /// Profile for 64-128 px patches.
    pub fn desk() -> Self {
        ArchSpec {
            base_channels: 32,
            depth: 3,
            time_embed_dim: 128,
        }
    }

    /// Small profile for tests and CPU-scale experiments.
    pub fn tiny() -> Self {
        ArchSpec {
            base_channels: 8,
            depth: 2,
            time_embed_dim: 32,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `gcd(NORM_GROUPS, channels)`, so narrow layers still normalize.
    pub fn groups_for(channels: usize) -> usize {
        let (mut a, mut b) = (NORM_GROUPS, channels);
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 {
            return Err(Error::validation("base_channels and depth must be positive"));
        }
        if self.depth > 8 {
            return Err(Error::validation(format!("depth {} is unreasonably deep", self.depth)));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::validation("time_embed_dim must be a positive even number"));
        }
        Ok(())
    }
}
