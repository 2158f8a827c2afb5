//! Synthetic paired-data generation: ground-truth signals, a pinhole-dependent
//! blur standing in for the microscope, and shot/read noise.

mod noise;
mod psf;
mod signal;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::derive_path;
use crate::scalar::Real;

pub use noise::{add_noise, NoiseSpec, EXACT_POISSON_LIMIT};
pub use psf::{
    apply_psf, make_psf, recommended_radius, Kernel, PsfMode, PsfSpec, MIN_KERNEL_MASS,
    PINHOLE_WIDTH_COEFF,
};
pub use signal::{gen_signal, SignalSpec, StructureKind, MIN_SIGNAL_SIDE};

/// Stream tags for the two noise draws of a pair.
const HAZY_STREAM: u64 = 0;
const CLEAN_STREAM: u64 = 1;

/// A hazy observation and its clean counterpart, both rendered from the same
/// underlying signal.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample<T> {
    pub hazy: Raster<T>,
    pub clean: Raster<T>,
    pub signal_id: u64,
}

/// Renders one pair. The two noise draws use child seeds of `noise.seed`
/// keyed by `signal_id`, so they are independent but reproducible.
pub fn make_pair<T: Real>(
    signal: &Raster<T>,
    signal_id: u64,
    hazy_psf: &PsfSpec,
    clean_psf: &PsfSpec,
    noise: &NoiseSpec,
) -> Result<PairedSample<T>> {
    let hazy_kernel = make_psf::<T>(hazy_psf)?;
    let clean_kernel = make_psf::<T>(clean_psf)?;
    let hazy_noise = noise.with_seed(derive_path(noise.seed, &[signal_id, HAZY_STREAM]));
    let clean_noise = noise.with_seed(derive_path(noise.seed, &[signal_id, CLEAN_STREAM]));
    let hazy = add_noise(&apply_psf(signal, &hazy_kernel)?, &hazy_noise)?;
    let clean = add_noise(&apply_psf(signal, &clean_kernel)?, &clean_noise)?;
    Ok(PairedSample {
        hazy,
        clean,
        signal_id,
    })
}

/// Full recipe for one synthetic pair family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub signal: SignalSpec,
    pub hazy_psf: PsfSpec,
    pub clean_psf: PsfSpec,
    pub noise: NoiseSpec,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.hazy_psf.validate()?;
        self.clean_psf.validate()?;
        self.noise.validate()
    }

    /// Signal seed for a given id.
    pub fn signal_seed(&self, signal_id: u64) -> u64 {
        derive_path(self.signal.seed, &[signal_id])
    }

    pub fn simulate<T: Real>(&self, signal_id: u64) -> Result<PairedSample<T>> {
        let signal = gen_signal::<T>(&self.signal.with_seed(self.signal_seed(signal_id)))?;
        make_pair(&signal, signal_id, &self.hazy_psf, &self.clean_psf, &self.noise)
    }
}

/// Mean and standard deviation of one image role.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleStats {
    pub mean: f64,
    pub std: f64,
}

impl RoleStats {
    pub fn normalize<T: Real>(&self, r: &Raster<T>) -> Raster<T> {
        let (m, s) = (T::of(self.mean), T::of(self.std));
        r.map(|v| (v - m) / s)
    }

    pub fn denormalize<T: Real>(&self, r: &Raster<T>) -> Raster<T> {
        let (m, s) = (T::of(self.mean), T::of(self.std));
        r.map(|v| v * s + m)
    }

    /// Scales a spread (std map) into normalized units.
    pub fn normalize_spread<T: Real>(&self, r: &Raster<T>) -> Raster<T> {
        let s = T::of(self.std);
        r.map(|v| v / s)
    }
}

/// Training-set statistics for the hazy and clean roles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub hazy: RoleStats,
    pub clean: RoleStats,
}

fn role_stats<'a, T: Real + 'a>(rasters: impl Iterator<Item = &'a Raster<T>>, role: &str) -> Result<RoleStats> {
    let (mut n, mut sum, mut sum_sq) = (0usize, 0.0f64, 0.0f64);
    let rasters: Vec<&Raster<T>> = rasters.collect();
    for r in &rasters {
        for v in r.as_slice() {
            sum += v.f64();
            n += 1;
        }
    }
    let mean = sum / n as f64;
    for r in &rasters {
        for v in r.as_slice() {
            let d = v.f64() - mean;
            sum_sq += d * d;
        }
    }
    let std = (sum_sq / n as f64).sqrt();
    if !(std > 0.0) {
        return Err(Error::Data(format!("{role} images have zero standard deviation")));
    }
    Ok(RoleStats { mean, std })
}

pub fn compute_norm_stats<T: Real>(dataset: &[PairedSample<T>]) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot compute normalization stats of an empty dataset".into()));
    }
    Ok(NormStats {
        hazy: role_stats(dataset.iter().map(|p| &p.hazy), "hazy")?,
        clean: role_stats(dataset.iter().map(|p| &p.clean), "clean")?,
    })
}
