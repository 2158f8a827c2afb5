//! Shot noise plus Gaussian read noise.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{rng_from_seed, standard_normal};
use crate::scalar::Real;

/// Above this mean photon count the Poisson draw is replaced by its normal limit.
pub const EXACT_POISSON_LIMIT: f64 = 1e5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Photons per intensity unit.
    pub photon_gain: f64,
    /// Read noise standard deviation, in intensity units.
    pub read_sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.photon_gain > 0.0) {
            return Err(Error::validation(format!("photon_gain must be > 0, got {}", self.photon_gain)));
        }
        if !(self.read_sigma >= 0.0 && self.read_sigma.is_finite()) {
            return Err(Error::validation(format!("read_sigma must be >= 0, got {}", self.read_sigma)));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        NoiseSpec { seed, ..self.clone() }
    }
}

fn photon_count<R: Rng>(lambda: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 {
        0.0
    } else if lambda < EXACT_POISSON_LIMIT {
        Poisson::new(lambda).expect("positive finite rate").sample(rng)
    } else {
        let z: f64 = standard_normal(rng);
        (lambda + lambda.sqrt() * z).max(0.0)
    }
}

/// `Poisson(gain * image) / gain + N(0, read_sigma^2)`, seeded from `spec.seed`.
pub fn add_noise<T: Real>(image: &Raster<T>, spec: &NoiseSpec) -> Result<Raster<T>> {
    spec.validate()?;
    if let Some(v) = image.as_slice().iter().find(|v| !(v.f64() >= 0.0)) {
        return Err(Error::validation(format!("noise model needs non-negative pixels, found {v}")));
    }
    let mut rng = rng_from_seed(spec.seed);
    Ok(image.map(|v| {
        let counts = photon_count(spec.photon_gain * v.f64(), &mut rng);
        let read = if spec.read_sigma > 0.0 {
            spec.read_sigma * standard_normal::<f64, _>(&mut rng)
        } else {
            0.0
        };
        T::of(counts / spec.photon_gain + read)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(gain: f64, read: f64, seed: u64) -> NoiseSpec {
        NoiseSpec {
            photon_gain: gain,
            read_sigma: read,
            seed,
        }
    }

    #[test]
    fn zero_image_without_read_noise_stays_zero() {
        let img = Raster::<f32>::zeros(16, 16);
        let out = add_noise(&img, &spec(1.0, 0.0, 1)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huge_gain_converges_to_input() {
        let img = Raster::<f64>::from_fn(8, 8, |r, c| (r + c) as f64 * 0.5);
        let out = add_noise(&img, &spec(1e12, 0.0, 2)).unwrap();
        for (a, b) in img.as_slice().iter().zip(out.as_slice()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_image_mean_within_three_standard_errors() {
        let n = 100; // 10^4 draws
        let img = Raster::<f64>::filled(n, n, 5.0);
        let gain = 2.0;
        let read = 0.5;
        let out = add_noise(&img, &spec(gain, read, 3)).unwrap();
        let mean = out.mean_f64();
        let var = 5.0 / gain + read * read;
        let se = (var / (n * n) as f64).sqrt();
        assert!((mean - 5.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let img = Raster::<f32>::filled(8, 8, 10.0);
        let a = add_noise(&img, &spec(1.0, 1.0, 9)).unwrap();
        let b = add_noise(&img, &spec(1.0, 1.0, 9)).unwrap();
        let c = add_noise(&img, &spec(1.0, 1.0, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn negative_pixels_are_rejected() {
        let mut img = Raster::<f32>::zeros(4, 4);
        img.set(0, 0, -1.0);
        assert!(add_noise(&img, &spec(1.0, 0.0, 0)).is_err());
        assert!(add_noise(&Raster::<f32>::zeros(2, 2), &spec(0.0, 0.0, 0)).is_err());
    }

    #[test]
    fn normal_limit_branch_is_unbiased() {
        // mean photon count above the exact-sampling limit
        let img = Raster::<f64>::filled(50, 50, 2e5);
        let out = add_noise(&img, &spec(1.0, 0.0, 4)).unwrap();
        let se = (2e5f64 / 2500.0).sqrt();
        assert!((out.mean_f64() - 2e5).abs() < 4.0 * se);
    }
}
