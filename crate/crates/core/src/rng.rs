//! Seed derivation and random draws.
//!
//! Every stochastic routine takes either an explicit RNG or a 64-bit seed.
//! Child seeds are derived with a splitmix64 finalizer over `(parent, tag)`,
//! so that any component of a run can be regenerated in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::raster::Raster;
use crate::scalar::Real;

pub type SimRng = ChaCha8Rng;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for stream `tag` of `parent`.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix(splitmix(parent) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Child seed addressed by a path of tags, e.g. `[signal_id, role]`.
pub fn derive_path(parent: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(parent, |s, &t| derive_seed(s, t))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::of(z)
}

/// Raster of i.i.d. standard normal draws.
pub fn normal_raster<T: Real, R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Raster<T> {
    let data = (0..height * width).map(|_| standard_normal(rng)).collect();
    Raster::from_vec(height, width, data).expect("length matches")
}
