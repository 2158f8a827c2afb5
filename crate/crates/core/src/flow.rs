//! Linear interpolation path between base noise and clean images, its constant
//! velocity target, and the guided flow-matching regression loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::normal_raster;
use crate::scalar::Real;

/// How training times are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeSampling {
    /// Uniform over the grid `{0, 1/T, ..., 1}`.
    #[default]
    Grid,
    /// Uniform on `[0, 1]`.
    Continuous,
}

/// Uniform draw from `{i / steps : i = 0..=steps}`.
pub fn sample_time<T: Real, R: Rng + ?Sized>(steps: usize, rng: &mut R) -> T {
    assert!(steps >= 1, "steps must be >= 1");
    let i = rng.random_range(0..=steps);
    T::of(i as f64 / steps as f64)
}

pub fn sample_time_with<T: Real, R: Rng + ?Sized>(mode: TimeSampling, steps: usize, rng: &mut R) -> T {
    match mode {
        TimeSampling::Grid => sample_time(steps, rng),
        TimeSampling::Continuous => T::of(rng.random_range(0.0..=1.0)),
    }
}

/// `(1 - t) * x0 + t * x1`.
pub fn interpolate<T: Real>(x0: &Raster<T>, x1: &Raster<T>, t: T) -> Result<Raster<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::validation(format!("interpolation time {t} outside [0, 1]")));
    }
    let s = T::one() - t;
    // the endpoints are returned exactly, not via 0 * inf-prone arithmetic
    if t == T::zero() {
        x0.ensure_same_shape(x1)?;
        return Ok(x0.clone());
    }
    if t == T::one() {
        x0.ensure_same_shape(x1)?;
        return Ok(x1.clone());
    }
    x0.zip_map(x1, |a, b| s * a + t * b)
}

/// `x1 - x0`, the time-independent velocity of the straight path.
pub fn target_velocity<T: Real>(x0: &Raster<T>, x1: &Raster<T>) -> Result<Raster<T>> {
    x0.zip_map(x1, |a, b| b - a)
}

/// Mean squared error between predicted and target velocity.
pub fn guided_cfm_loss<T: Real>(v_pred: &Raster<T>, v_target: &Raster<T>) -> Result<T> {
    v_pred.ensure_same_shape(v_target)?;
    let sum: f64 = v_pred
        .as_slice()
        .iter()
        .zip(v_target.as_slice())
        .map(|(&a, &b)| {
            let d = (a - b).f64();
            d * d
        })
        .sum();
    Ok(T::of(sum / v_pred.len() as f64))
}

/// Base sample of the degradation-coupled baseline: `degradation + sigma * z`.
pub fn sifm_base_sample<T: Real, R: Rng + ?Sized>(
    degradation: &Raster<T>,
    sigma: T,
    rng: &mut R,
) -> Result<Raster<T>> {
    if !(sigma >= T::zero()) {
        return Err(Error::validation(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == T::zero() {
        return Ok(degradation.clone());
    }
    let (h, w) = degradation.shape();
    let z: Raster<T> = normal_raster(h, w, rng);
    degradation.zip_map(&z, |d, z| d + sigma * z)
}

/// Where the base sample `x0` comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Coupling {
    /// `x0 ~ N(0, I)`, conditioning supplied to the field.
    #[default]
    Gaussian,
    /// `x0 = hazy + sigma * z`.
    Sifm { sigma: f64 },
}

/// One training example of the guided objective.
#[derive(Clone, Debug)]
pub struct FlowSample<T> {
    pub x0: Raster<T>,
    pub x1: Raster<T>,
    pub x_cond: Raster<T>,
    pub t: T,
    pub x_t: Raster<T>,
    pub v_target: Raster<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn new(x0: Raster<T>, x1: Raster<T>, x_cond: Raster<T>, t: T) -> Result<Self> {
        x1.ensure_same_shape(&x_cond)?;
        let x_t = interpolate(&x0, &x1, t)?;
        let v_target = target_velocity(&x0, &x1)?;
        Ok(FlowSample {
            x0,
            x1,
            x_cond,
            t,
            x_t,
            v_target,
        })
    }

    /// Draws `t` and `x0` for a (clean, hazy) pair.
    pub fn draw<R: Rng + ?Sized>(
        x1: Raster<T>,
        x_cond: Raster<T>,
        steps: usize,
        time_sampling: TimeSampling,
        coupling: Coupling,
        rng: &mut R,
    ) -> Result<Self> {
        let t = sample_time_with(time_sampling, steps, rng);
        let (h, w) = x1.shape();
        let x0 = match coupling {
            Coupling::Gaussian => normal_raster(h, w, rng),
            Coupling::Sifm { sigma } => sifm_base_sample(&x_cond, T::of(sigma), rng)?,
        };
        Self::new(x0, x1, x_cond, t)
    }
}
