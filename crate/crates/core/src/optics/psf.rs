//! Parametric point spread functions and reflect-padded convolution.
//!
//! The PSF is an isotropic Gaussian whose width grows linearly with the
//! detection pinhole diameter:
//!
//! ```text
//! sigma_eff = base_sigma * (1 + PINHOLE_WIDTH_COEFF * pinhole_au)
//! ```
//!
//! A closed pinhole (confocal, ~1 AU) gives a near-delta kernel for small
//! `base_sigma`; an open pinhole (widefield, ~30 AU) spreads the light over
//! several pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Real;

/// Relative kernel widening per Airy unit of pinhole diameter.
pub const PINHOLE_WIDTH_COEFF: f64 = 0.1;

/// Fraction of the untruncated PSF mass the kernel support must hold.
pub const MIN_KERNEL_MASS: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfMode {
    Confocal,
    Widefield,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfSpec {
    pub mode: PsfMode,
    /// Pinhole diameter in Airy units.
    pub pinhole_au: f64,
    /// Width at a vanishing pinhole, in pixels.
    pub base_sigma: f64,
    pub kernel_radius: usize,
}

impl PsfSpec {
    pub fn new(mode: PsfMode, pinhole_au: f64, base_sigma: f64) -> Self {
        let mut spec = PsfSpec {
            mode,
            pinhole_au,
            base_sigma,
            kernel_radius: 0,
        };
        spec.kernel_radius = recommended_radius(spec.effective_sigma());
        spec
    }

    pub fn effective_sigma(&self) -> f64 {
        self.base_sigma * (1.0 + PINHOLE_WIDTH_COEFF * self.pinhole_au)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pinhole_au > 0.0 && self.pinhole_au.is_finite()) {
            return Err(Error::validation(format!("pinhole_au must be positive, got {}", self.pinhole_au)));
        }
        if !(self.base_sigma > 0.0 && self.base_sigma.is_finite()) {
            return Err(Error::validation(format!("base_sigma must be positive, got {}", self.base_sigma)));
        }
        Ok(())
    }
}

/// Smallest radius that comfortably holds the mass requirement.
pub fn recommended_radius(sigma: f64) -> usize {
    (3.5 * sigma).ceil().max(1.0) as usize
}

/// Square convolution kernel of side `2 * radius + 1`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T> {
    radius: usize,
    weights: Vec<T>,
}

impl<T: Real> Kernel<T> {
    pub fn from_weights(radius: usize, weights: Vec<T>) -> Result<Self> {
        let side = 2 * radius + 1;
        if weights.len() != side * side {
            return Err(Error::validation(format!(
                "kernel of radius {radius} needs {} weights, got {}",
                side * side,
                weights.len()
            )));
        }
        Ok(Kernel { radius, weights })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Weight at offset `(dr, dc)` from the centre.
    pub fn at(&self, dr: isize, dc: isize) -> T {
        let r = self.radius as isize;
        self.weights[((dr + r) as usize) * self.side() + (dc + r) as usize]
    }

    pub fn sum(&self) -> T {
        self.weights.iter().copied().sum()
    }

    /// `sum_k w_k * |offset_k|^2`.
    pub fn second_moment(&self) -> f64 {
        let r = self.radius as isize;
        let mut m = 0.0;
        for dr in -r..=r {
            for dc in -r..=r {
                m += self.at(dr, dc).f64() * (dr * dr + dc * dc) as f64;
            }
        }
        m
    }

    pub fn to_raster(&self) -> Raster<T> {
        Raster::from_vec(self.side(), self.side(), self.weights.clone()).expect("square kernel")
    }
}

fn gaussian_mass(sigma: f64, radius: isize) -> f64 {
    let mut m = 0.0;
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            m += (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    m
}

/// Builds the unit-sum kernel for `spec`.
pub fn make_psf<T: Real>(spec: &PsfSpec) -> Result<Kernel<T>> {
    spec.validate()?;
    let sigma = spec.effective_sigma();
    let radius = spec.kernel_radius as isize;
    let reference = radius.max((8.0 * sigma).ceil() as isize + 1);
    let mass = gaussian_mass(sigma, radius) / gaussian_mass(sigma, reference);
    if mass < MIN_KERNEL_MASS {
        return Err(Error::Truncation {
            radius: spec.kernel_radius,
            mass,
        });
    }
    let side = (2 * radius + 1) as usize;
    let mut raw = Vec::with_capacity(side * side);
    for dr in -radius..=radius {
        for dc in -radius..=radius {
            raw.push((-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = raw.iter().sum();
    Kernel::from_weights(spec.kernel_radius, raw.into_iter().map(|w| T::of(w / total)).collect())
}

/// Convolves `signal` with `kernel` using reflect padding at the borders.
pub fn apply_psf<T: Real>(signal: &Raster<T>, kernel: &Kernel<T>) -> Result<Raster<T>> {
    if !signal.is_finite() {
        return Err(Error::validation("signal contains non-finite values"));
    }
    let r = kernel.radius() as isize;
    let (h, w) = signal.shape();
    let side = kernel.side();
    // pad once so the inner loop is branch-free
    let padded = signal.crop_reflect(-r, -r, h + 2 * r as usize, w + 2 * r as usize);
    let pw = padded.width();
    let src = padded.as_slice();
    let kw = kernel.weights();
    let mut out = Raster::zeros(h, w);
    let dst = out.as_mut_slice();
    for row in 0..h {
        for col in 0..w {
            let mut acc = T::zero();
            for kr in 0..side {
                let base = (row + kr) * pw + col;
                // flipped kernel: true convolution
                let krow = &kw[(side - 1 - kr) * side..(side - kr) * side];
                for kc in 0..side {
                    acc += src[base + kc] * krow[side - 1 - kc];
                }
            }
            dst[row * w + col] = acc;
        }
    }
    Ok(out)
}
