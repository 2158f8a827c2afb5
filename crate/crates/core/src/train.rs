//! Guided flow-matching training: batch assembly and optimizer steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Coupling, FlowSample, TimeSampling};
use crate::net::{clip_global_norm, Adam, AdamConfig, ArchSpec, Conditioning, VelocityNet};
use crate::optics::{NormStats, PairedSample};
use crate::raster::Raster;
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps_t: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub max_iterations: u64,
    pub seed: u64,
    pub conditioning: Conditioning,
    pub time_sampling: TimeSampling,
    pub coupling: Coupling,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Random flips and transposes of each training pair.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_t: 20,
            batch_size: 16,
            learning_rate: 1e-4,
            patch_size: 64,
            max_iterations: 5000,
            seed: 0,
            conditioning: Conditioning::Concat,
            time_sampling: TimeSampling::Grid,
            coupling: Coupling::Gaussian,
            grad_clip: 1.0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if self.steps_t == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("steps_t, batch_size and patch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !self.patch_size.is_multiple_of(arch.size_multiple()) {
            return Err(Error::Config(format!(
                "patch_size {} must be divisible by 2^depth = {}",
                self.patch_size,
                arch.size_multiple()
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Normalized (clean, hazy) training pairs.
#[derive(Clone, Debug)]
pub struct TrainingSet<T> {
    pub clean: Vec<Raster<T>>,
    pub hazy: Vec<Raster<T>>,
}

impl<T: Real> TrainingSet<T> {
    pub fn from_pairs(pairs: &[PairedSample<T>], stats: &NormStats) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("empty train split".into()));
        }
        Ok(TrainingSet {
            clean: pairs.iter().map(|p| stats.clean.normalize(&p.clean)).collect(),
            hazy: pairs.iter().map(|p| stats.hazy.normalize(&p.hazy)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// The batch for `iteration`, drawn from a seed derived from
    /// `(config.seed, iteration)` so training can resume mid-run.
    pub fn batch(&self, config: &TrainConfig, iteration: u64) -> Result<Vec<FlowSample<T>>> {
        let mut rng = rng_from_seed(derive_seed(config.seed, iteration));
        (0..config.batch_size)
            .map(|_| {
                let idx = rng.random_range(0..self.len());
                let (clean, hazy) = self.patch(idx, config, &mut rng)?;
                FlowSample::draw(clean, hazy, config.steps_t, config.time_sampling, config.coupling, &mut rng)
            })
            .collect()
    }

    fn patch<R: Rng>(&self, idx: usize, config: &TrainConfig, rng: &mut R) -> Result<(Raster<T>, Raster<T>)> {
        let (clean, hazy) = (&self.clean[idx], &self.hazy[idx]);
        let (h, w) = clean.shape();
        let p = config.patch_size;
        if p > h || p > w {
            return Err(Error::Config(format!("patch_size {p} exceeds image size {h}x{w}")));
        }
        let r = rng.random_range(0..=h - p) as isize;
        let c = rng.random_range(0..=w - p) as isize;
        let mut clean = clean.crop_reflect(r, c, p, p);
        let mut hazy = hazy.crop_reflect(r, c, p, p);
        if config.augment {
            let code = rng.random_range(0..8u8);
            clean = clean.dihedral(code);
            hazy = hazy.dihedral(code);
        }
        Ok((clean, hazy))
    }
}

/// Network plus optimizer state; the single writer during training.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub net: VelocityNet<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub iteration: u64,
}

impl<T: Real> Trainer<T> {
    pub fn new(arch: ArchSpec, config: TrainConfig) -> Result<Self> {
        config.validate(&arch)?;
        let net = VelocityNet::init(arch, config.conditioning, derive_seed(config.seed, u64::MAX))?;
        let adam = Adam::new(config.adam(), net.param_count());
        Ok(Trainer {
            net,
            adam,
            config,
            iteration: 0,
        })
    }

    pub fn from_parts(net: VelocityNet<T>, adam: Adam<T>, config: TrainConfig, iteration: u64) -> Result<Self> {
        config.validate(net.arch())?;
        if adam.m.len() != net.param_count() || adam.v.len() != net.param_count() {
            return Err(Error::Incompatible("optimizer state does not match parameter count".into()));
        }
        Ok(Trainer {
            net,
            adam,
            config,
            iteration,
        })
    }

    /// One gradient step on `batch`; returns the pre-update loss.
    pub fn training_step(&mut self, batch: &[FlowSample<T>]) -> Result<T> {
        let (loss, mut grads) = self.net.loss_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence {
                iteration: self.iteration,
                detail: format!("loss is {loss}"),
            });
        }
        if self.config.grad_clip > 0.0 {
            let norm = clip_global_norm(&mut grads, self.config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::TrainingDivergence {
                    iteration: self.iteration,
                    detail: format!("gradient norm is {norm} at loss {loss}"),
                });
            }
        }
        self.adam.update(self.net.params_mut().values_mut(), &grads);
        self.iteration += 1;
        Ok(loss)
    }

    /// Draws the batch for the current iteration and steps once.
    pub fn step_on(&mut self, data: &TrainingSet<T>) -> Result<T> {
        let batch = data.batch(&self.config, self.iteration)?;
        self.training_step(&batch)
    }

    /// Runs until `config.max_iterations`, reporting `(iteration, loss)`.
    pub fn run(&mut self, data: &TrainingSet<T>, mut on_step: impl FnMut(u64, T)) -> Result<()> {
        while self.iteration < self.config.max_iterations {
            let loss = self.step_on(data)?;
            on_step(self.iteration, loss);
        }
        Ok(())
    }
}

/// Mean loss over a fixed set of validation batches.
pub fn validation_loss<T: Real>(net: &VelocityNet<T>, data: &TrainingSet<T>, config: &TrainConfig, batches: u64) -> Result<f64> {
    let mut total = 0.0;
    for b in 0..batches {
        // a seed stream disjoint from training iterations
        let batch = data.batch(config, u64::MAX - 1 - b)?;
        total += net.loss(&batch)?.f64();
    }
    Ok(total / batches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{compute_norm_stats, NoiseSpec, PsfMode, PsfSpec, SignalSpec, SimulationSpec, StructureKind};

    fn toy_set(n: u64) -> TrainingSet<f32> {
        let spec = SimulationSpec {
            signal: SignalSpec {
                width: 32,
                height: 32,
                structure_kind: StructureKind::Blobs,
                object_count_range: [2, 4],
                intensity_range: [50.0, 150.0],
                seed: 1,
            },
            hazy_psf: PsfSpec::new(PsfMode::Widefield, 30.0, 0.6),
            clean_psf: PsfSpec::new(PsfMode::Confocal, 1.0, 0.4),
            noise: NoiseSpec {
                photon_gain: 1.0,
                read_sigma: 1.0,
                seed: 2,
            },
        };
        let pairs: Vec<_> = (0..n).map(|i| spec.simulate::<f32>(i).unwrap()).collect();
        let stats = compute_norm_stats(&pairs).unwrap();
        TrainingSet::from_pairs(&pairs, &stats).unwrap()
    }

    fn small_config(lr: f64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            patch_size: 16,
            learning_rate: lr,
            max_iterations: 10,
            seed: 9,
            ..Default::default()
        }
    }

    fn arch() -> ArchSpec {
        ArchSpec {
            base_channels: 8,
            depth: 2,
            time_embed_dim: 16,
        }
    }

    #[test]
    fn identical_states_give_identical_losses() {
        let data = toy_set(4);
        let mut a = Trainer::<f32>::new(arch(), small_config(1e-3)).unwrap();
        let mut b = a.clone();
        let la = a.step_on(&data).unwrap();
        let lb = b.step_on(&data).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.net.params().values(), b.net.params().values());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let data = toy_set(4);
        let mut t = Trainer::<f32>::new(arch(), small_config(0.0)).unwrap();
        let before = t.net.params().values().to_vec();
        for _ in 0..3 {
            t.step_on(&data).unwrap();
        }
        assert_eq!(before, t.net.params().values());
        assert_eq!(t.iteration, 3);
    }

    #[test]
    fn loss_descends_on_a_frozen_batch() {
        let data = toy_set(8);
        let mut t = Trainer::<f32>::new(arch(), small_config(1e-3)).unwrap();
        let batch = data.batch(&t.config, 0).unwrap();
        let first = t.net.loss(&batch).unwrap();
        for _ in 0..200 {
            t.training_step(&batch).unwrap();
        }
        let last = t.net.loss(&batch).unwrap();
        assert!(last < 0.7 * first, "loss {first} -> {last}");
    }

    #[test]
    fn diverged_loss_is_reported() {
        let data = toy_set(2);
        let mut t = Trainer::<f32>::new(arch(), small_config(1e-3)).unwrap();
        let mut batch = data.batch(&t.config, 0).unwrap();
        batch[0].v_target.as_mut_slice()[0] = f32::NAN;
        match t.training_step(&batch) {
            Err(Error::TrainingDivergence { iteration, .. }) => assert_eq!(iteration, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn batches_are_reproducible_by_iteration() {
        let data = toy_set(4);
        let cfg = small_config(1e-3);
        let a = data.batch(&cfg, 5).unwrap();
        let b = data.batch(&cfg, 5).unwrap();
        assert_eq!(a[0].x_t, b[0].x_t);
        assert_eq!(a[3].t, b[3].t);
        let c = data.batch(&cfg, 6).unwrap();
        assert_ne!(a[0].x0, c[0].x0);
    }

    #[test]
    fn config_rejects_indivisible_patches() {
        let mut cfg = small_config(1e-3);
        cfg.patch_size = 18;
        assert!(cfg.validate(&arch()).is_err());
    }
}
