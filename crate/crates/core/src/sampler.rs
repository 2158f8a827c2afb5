//! Euler integration of a learned velocity field and posterior sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Coupling;
use crate::net::VelocityModel;
use crate::raster::Raster;
use crate::rng::{derive_seed, normal_raster, rng_from_seed};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps_t: usize,
    pub n_samples: usize,
    pub seed: u64,
    /// Must match the coupling the model was trained with.
    pub coupling: Coupling,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps_t: 20,
            n_samples: 50,
            seed: 0,
            coupling: Coupling::Gaussian,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_t == 0 {
            return Err(Error::Config("steps_t must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if let Coupling::Sifm { sigma } = self.coupling {
            if !(sigma >= 0.0) {
                return Err(Error::Config(format!("sifm sigma must be >= 0, got {sigma}")));
            }
        }
        Ok(())
    }

    /// Seed of the base-noise draw for posterior sample `index`.
    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

/// Wraps a closure `(t, state, cond) -> velocity` as a [`VelocityModel`].
pub struct FieldFn<F>(pub F);

impl<T, F> VelocityModel<T> for FieldFn<F>
where
    T: Real,
    F: Fn(T, &Raster<T>, &Raster<T>) -> Raster<T>,
{
    fn velocity_batch(&self, t: T, states: &[Raster<T>], cond: &Raster<T>) -> Result<Vec<Raster<T>>> {
        Ok(states.iter().map(|x| (self.0)(t, x, cond)).collect())
    }
}

/// Starting state for one integration under `coupling`.
pub fn base_state<T: Real>(coupling: Coupling, noise: Raster<T>, cond: &Raster<T>) -> Result<Raster<T>> {
    match coupling {
        Coupling::Gaussian => Ok(noise),
        Coupling::Sifm { sigma } => {
            let s = T::of(sigma);
            cond.zip_map(&noise, |c, z| c + s * z)
        }
    }
}

/// Integrates every state in `states` from t = 0 to 1 with `steps` Euler
/// steps, evaluating the field at the current state and left time point.
pub fn euler_from<T: Real, M: VelocityModel<T> + ?Sized>(
    field: &M,
    cond: &Raster<T>,
    mut states: Vec<Raster<T>>,
    steps: usize,
) -> Result<Vec<Raster<T>>> {
    if steps == 0 {
        return Err(Error::Config("steps_t must be >= 1".into()));
    }
    let dt = T::one() / T::of(steps as f64);
    for i in 0..steps {
        let t = T::of(i as f64) / T::of(steps as f64);
        let v = field.velocity_batch(t, &states, cond)?;
        if v.len() != states.len() {
            return Err(Error::validation(format!(
                "velocity field returned {} outputs for {} states",
                v.len(),
                states.len()
            )));
        }
        for (x, vx) in states.iter_mut().zip(&v) {
            x.ensure_same_shape(vx)?;
            for (a, &b) in x.as_mut_slice().iter_mut().zip(vx.as_slice()) {
                *a += dt * b;
            }
            if !x.is_finite() {
                return Err(Error::IntegrationDivergence { step: i + 1, steps });
            }
        }
    }
    Ok(states)
}

/// Draws `x_0 ~ N(0, I)` from `rng` and integrates it to t = 1.
pub fn euler_integrate<T: Real, M: VelocityModel<T> + ?Sized, R: Rng + ?Sized>(
    field: &M,
    cond: &Raster<T>,
    steps: usize,
    rng: &mut R,
) -> Result<Raster<T>> {
    let x0 = normal_raster(cond.height(), cond.width(), rng);
    let mut out = euler_from(field, cond, vec![x0], steps)?;
    Ok(out.pop().expect("one state in, one out"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSet<T> {
    pub samples: Vec<Raster<T>>,
    pub mmse: Raster<T>,
    /// Population standard deviation over samples.
    pub pixel_std: Raster<T>,
    pub observation_ref: String,
}

impl<T: Real> PosteriorSet<T> {
    pub fn from_samples(samples: Vec<Raster<T>>, observation_ref: impl Into<String>) -> Result<Self> {
        let (mmse, pixel_std) = mean_and_std(&samples)?;
        Ok(PosteriorSet {
            samples,
            mmse,
            pixel_std,
            observation_ref: observation_ref.into(),
        })
    }

    /// The set restricted to its first `k` samples.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.samples.len() {
            return Err(Error::validation(format!(
                "prefix of {k} from a set of {} samples",
                self.samples.len()
            )));
        }
        Self::from_samples(self.samples[..k].to_vec(), self.observation_ref.clone())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Pixel-wise mean and population standard deviation, accumulated in f64.
pub fn mean_and_std<T: Real>(samples: &[Raster<T>]) -> Result<(Raster<T>, Raster<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::validation("posterior needs at least one sample"))?;
    for s in &samples[1..] {
        first.ensure_same_shape(s)?;
    }
    let (h, w) = first.shape();
    let k = samples.len() as f64;
    let mut mean = vec![0.0f64; h * w];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.as_slice()) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= k);
    let mut var = vec![0.0f64; h * w];
    for s in samples {
        for ((acc, &m), &v) in var.iter_mut().zip(&mean).zip(s.as_slice()) {
            let d = v.f64() - m;
            *acc += d * d;
        }
    }
    let mmse = Raster::from_vec(h, w, mean.iter().map(|&m| T::of(m)).collect())?;
    let std = Raster::from_vec(h, w, var.iter().map(|&v| T::of((v / k).sqrt())).collect())?;
    Ok((mmse, std))
}

/// `cfg.n_samples` integrations; sample `j` starts from the base noise seeded
/// by `cfg.sample_seed(j)`, so smaller sets are prefixes of larger ones.
pub fn sample_posterior<T: Real, M: VelocityModel<T> + ?Sized>(
    field: &M,
    cond: &Raster<T>,
    cfg: &SamplerConfig,
    observation_ref: &str,
) -> Result<PosteriorSet<T>> {
    cfg.validate()?;
    let (h, w) = cond.shape();
    let starts = (0..cfg.n_samples)
        .map(|j| {
            let noise = normal_raster(h, w, &mut rng_from_seed(cfg.sample_seed(j)));
            base_state(cfg.coupling, noise, cond)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = euler_from(field, cond, starts, cfg.steps_t)?;
    PosteriorSet::from_samples(samples, observation_ref)
}

fn mse<T: Real>(a: &Raster<T>, b: &Raster<T>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmseBoundReport {
    pub mmse_mse: f64,
    pub mean_sample_mse: f64,
    /// `mmse_mse <= mean_sample_mse + 1e-9`
    pub holds: bool,
}

pub fn mmse_mse_bound_check<T: Real>(posterior: &PosteriorSet<T>, gt: &Raster<T>) -> Result<MmseBoundReport> {
    posterior.mmse.ensure_same_shape(gt)?;
    let mmse_mse = mse(&posterior.mmse, gt);
    let mean_sample_mse = posterior.samples.iter().map(|s| mse(s, gt)).sum::<f64>() / posterior.len() as f64;
    Ok(MmseBoundReport {
        mmse_mse,
        mean_sample_mse,
        holds: mmse_mse <= mean_sample_mse + 1e-9,
    })
}
