use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, read_header, save_checkpoint};
use super::config::{ExperimentConfig, TilingMode};
use super::dataset::{
    create_dir, list_inputs, load_split, read_json, read_manifest, write_dataset, write_json, DatasetManifest,
    DATASET_MANIFEST, SPLITS,
};
use super::{record_run, unix_now};
use crate::error::{Error, Result};
use crate::net::VelocityNet;
use crate::optics::NormStats;
use crate::raster::Raster;
use crate::sampler::{sample_posterior, PosteriorSet, SamplerConfig};
use crate::tiler::{plan_tiles, sample_posterior_tiled};
use crate::train::{validation_loss, TrainingSet, Trainer};

pub const LOSS_LOG: &str = "loss_log.csv";
pub const PREDICTIONS_FILE: &str = "predictions.json";
const LOSS_HEADER: &str = "iteration,loss,wall_time_s";

#[derive(Clone, Debug)]
pub struct SimulateOutcome {
    pub dataset_dir: PathBuf,
    pub manifest: DatasetManifest,
    pub run_manifest: PathBuf,
}

/// Renders the train/val/test splits. Split folders left by an earlier run
/// of this command are replaced.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateOutcome> {
    let started = unix_now();
    let dir = cfg.paths.dataset_dir();
    if dir.join(DATASET_MANIFEST).is_file() {
        for split in SPLITS {
            let p = dir.join(split);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    create_dir(&dir)?;
    let s = cfg.dataset.splits;
    let manifest = write_dataset(&dir, &cfg.simulation(), [s.train, s.val, s.test])?;
    let run_manifest = record_run(cfg, "simulate", started, vec![dir.join(DATASET_MANIFEST)])?;
    Ok(SimulateOutcome {
        dataset_dir: dir,
        manifest,
        run_manifest,
    })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: u64,
    pub loss: f64,
    pub wall_time_s: f64,
}

impl LossRow {
    pub fn read_log(path: &Path) -> Result<Vec<LossRow>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let parse = |i: usize| -> Option<f64> { f.get(i)?.trim().parse().ok() };
                match (f.first().and_then(|s| s.trim().parse().ok()), parse(1), parse(2)) {
                    (Some(iteration), Some(loss), Some(wall_time_s)) => Ok(LossRow {
                        iteration,
                        loss,
                        wall_time_s,
                    }),
                    _ => Err(Error::Data(format!("{}: bad loss row `{l}`", path.display()))),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub loss_log: PathBuf,
    pub iterations: u64,
    pub run_manifest: PathBuf,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let fresh = !append || !path.is_file();
    let file = if fresh {
        File::create(path)
    } else {
        OpenOptions::new().append(true).open(path)
    }
    .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{LOSS_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Tracks the lowest validation loss seen, across resumes.
struct BestTracker {
    path: PathBuf,
    best: Option<f64>,
}

impl BestTracker {
    fn new(path: PathBuf) -> Self {
        let best = std::fs::read(&path)
            .ok()
            .and_then(|b| read_header(&b).ok().and_then(|(h, _)| h.val_loss));
        BestTracker { path, best }
    }

    fn offer(&mut self, trainer: &Trainer<f32>, stats: &NormStats, val: Option<f64>) -> Result<()> {
        let Some(v) = val else { return Ok(()) };
        if self.best.is_none_or(|b| v < b) {
            save_checkpoint(&self.path, trainer, stats, Some(v))?;
            self.best = Some(v);
        }
        Ok(())
    }
}

/// Trains from scratch or resumes from `resume`. Writes periodic
/// checkpoints, `best.hzck` by validation loss and `final.hzck`. On
/// divergence the state before the failing step is saved as
/// `last_good.hzck` and the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let started = unix_now();
    let clock = Instant::now();
    let data_dir = cfg.paths.dataset_dir();
    let manifest = read_manifest(&data_dir)?;
    let train_pairs = load_split(&data_dir, &manifest, "train")?;
    let stats = match (&manifest.norm_stats, train_pairs.is_empty()) {
        (Some(s), false) => *s,
        _ => return Err(Error::Data("empty train split".into())),
    };
    let data = TrainingSet::from_pairs(&train_pairs, &stats)?;
    let val_pairs = load_split(&data_dir, &manifest, "val")?;
    let val = if val_pairs.is_empty() {
        None
    } else {
        Some(TrainingSet::from_pairs(&val_pairs, &stats)?)
    };

    let mut trainer = match resume {
        Some(path) => {
            let loaded = load_checkpoint::<f32>(path)?;
            loaded.ensure_arch(&cfg.arch)?;
            if loaded.header.norm_stats != stats {
                return Err(Error::Incompatible(
                    "checkpoint was trained on a dataset with different statistics".into(),
                ));
            }
            loaded.into_trainer(cfg.train.config.clone())?
        }
        None => Trainer::<f32>::new(cfg.arch.clone(), cfg.train.config.clone())?,
    };

    let ckpt_dir = cfg.paths.checkpoint_dir();
    create_dir(&ckpt_dir)?;
    let log_path = cfg.paths.workdir.join(LOSS_LOG);
    let mut log = open_log(&log_path, resume.is_some())?;
    let mut best = BestTracker::new(ckpt_dir.join("best.hzck"));
    let val_loss = |t: &Trainer<f32>| -> Result<Option<f64>> {
        val.as_ref()
            .map(|v| validation_loss(&t.net, v, &t.config, cfg.train.val_batches.max(1)))
            .transpose()
    };
    let mut artifacts = vec![log_path.clone()];

    while trainer.iteration < trainer.config.max_iterations {
        let loss = match trainer.step_on(&data) {
            Ok(l) => l,
            Err(e @ Error::TrainingDivergence { .. }) => {
                log.flush().map_err(|io| Error::io(&log_path, io))?;
                save_checkpoint(&ckpt_dir.join("last_good.hzck"), &trainer, &stats, None)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{},{},{:.3}", trainer.iteration, loss, clock.elapsed().as_secs_f64())
            .map_err(|e| Error::io(&log_path, e))?;
        if trainer.iteration % cfg.train.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let v = val_loss(&trainer)?;
            let path = ckpt_dir.join(format!("iter_{:07}.hzck", trainer.iteration));
            save_checkpoint(&path, &trainer, &stats, v)?;
            best.offer(&trainer, &stats, v)?;
            eprintln!(
                "iteration {} loss {:.5} val {}",
                trainer.iteration,
                loss,
                v.map_or("-".into(), |v| format!("{v:.5}"))
            );
            artifacts.push(path);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let v = val_loss(&trainer)?;
    let final_checkpoint = ckpt_dir.join("final.hzck");
    save_checkpoint(&final_checkpoint, &trainer, &stats, v)?;
    best.offer(&trainer, &stats, v)?;
    artifacts.push(final_checkpoint.clone());
    let best_checkpoint = best.best.map(|_| best.path.clone());
    artifacts.extend(best_checkpoint.clone());
    let run_manifest = record_run(cfg, "train", started, artifacts)?;
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        loss_log: log_path,
        iterations: trainer.iteration,
        run_manifest,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub stem: String,
    pub input: PathBuf,
    pub gt: Option<PathBuf>,
    /// Folder holding `sample_NNN`, `mmse` and `std` rasters.
    pub dir: PathBuf,
    pub k: usize,
}

impl PredictionEntry {
    pub fn sample_path(&self, j: usize) -> PathBuf {
        self.dir.join(format!("sample_{j:03}.hzr"))
    }

    pub fn mmse_path(&self) -> PathBuf {
        self.dir.join("mmse.hzr")
    }

    pub fn std_path(&self) -> PathBuf {
        self.dir.join("std.hzr")
    }

    /// The first `k` stored samples as a posterior set.
    pub fn load_posterior(&self, k: usize) -> Result<PosteriorSet<f32>> {
        if k == 0 || k > self.k {
            return Err(Error::Data(format!("{} holds {} samples, asked for {k}", self.stem, self.k)));
        }
        let samples = (0..k)
            .map(|j| Raster::read(&self.sample_path(j)))
            .collect::<Result<Vec<_>>>()?;
        PosteriorSet::from_samples(samples, self.stem.clone())
    }
}

/// Index of a prediction run, in raw intensity units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub checkpoint: PathBuf,
    pub sampler: SamplerConfig,
    pub tiling: TilingMode,
    pub norm_stats: NormStats,
    pub entries: Vec<PredictionEntry>,
}

pub fn read_predictions(dir: &Path) -> Result<PredictionsFile> {
    let path = dir.join(PREDICTIONS_FILE);
    if !path.is_file() {
        return Err(Error::Data(format!("no {PREDICTIONS_FILE} in {}", dir.display())));
    }
    read_json(&path)
}

#[derive(Clone, Debug)]
pub struct PredictOutcome {
    pub out_dir: PathBuf,
    pub predictions: PredictionsFile,
    pub run_manifest: PathBuf,
}

/// Posterior over one raw observation, returned in raw clean units.
pub(crate) fn posterior_raw(
    net: &VelocityNet<f32>,
    cfg: &ExperimentConfig,
    sampler: &SamplerConfig,
    stats: &NormStats,
    hazy: &Raster<f32>,
    name: &str,
) -> Result<PosteriorSet<f32>> {
    let cond = stats.hazy.normalize(hazy);
    let post = match cfg.tiling.mode {
        TilingMode::Full => sample_posterior(net, &cond, sampler, name)?,
        TilingMode::Inner => {
            let grid = plan_tiles(cond.height(), cond.width(), cfg.tiling.tile, cfg.tiling.overlap)?;
            sample_posterior_tiled(net, &cond, &grid, sampler, name)?
        }
    };
    Ok(PosteriorSet {
        samples: post.samples.iter().map(|s| stats.clean.denormalize(s)).collect(),
        mmse: stats.clean.denormalize(&post.mmse),
        pixel_std: post.pixel_std.map(|s| s * stats.clean.std as f32),
        observation_ref: post.observation_ref,
    })
}

pub(crate) fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(VelocityNet<f32>, NormStats)> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    loaded.ensure_arch(&cfg.arch)?;
    if loaded.header.train.coupling != cfg.sample.coupling {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained with {:?} coupling, sampler is set to {:?}",
            loaded.header.train.coupling, cfg.sample.coupling
        )));
    }
    Ok((loaded.net, loaded.header.norm_stats))
}

/// Draws `cfg.sample.n_samples` posterior samples per input raster and
/// writes them with their mean and spread under `out/<stem>/`.
pub fn cmd_predict(cfg: &ExperimentConfig, checkpoint: &Path, input: &Path, out: &Path) -> Result<PredictOutcome> {
    let started = unix_now();
    let (net, stats) = load_model(cfg, checkpoint)?;
    let inputs = list_inputs(input)?;
    create_dir(out)?;
    let mut entries = Vec::with_capacity(inputs.len());
    for img in &inputs {
        let hazy = Raster::<f32>::read(&img.path)?;
        let post = posterior_raw(&net, cfg, &cfg.sample, &stats, &hazy, &img.stem)?;
        let entry = PredictionEntry {
            stem: img.stem.clone(),
            input: img.path.clone(),
            gt: img.gt.clone(),
            dir: out.join(&img.stem),
            k: post.len(),
        };
        create_dir(&entry.dir)?;
        for (j, s) in post.samples.iter().enumerate() {
            s.write(&entry.sample_path(j))?;
        }
        post.mmse.write(&entry.mmse_path())?;
        post.pixel_std.write(&entry.std_path())?;
        entries.push(entry);
    }
    let predictions = PredictionsFile {
        checkpoint: checkpoint.to_path_buf(),
        sampler: cfg.sample.clone(),
        tiling: cfg.tiling.mode,
        norm_stats: stats,
        entries,
    };
    let index = out.join(PREDICTIONS_FILE);
    write_json(&index, &predictions)?;
    let run_manifest = record_run(cfg, "predict", started, vec![index])?;
    Ok(PredictOutcome {
        out_dir: out.to_path_buf(),
        predictions,
        run_manifest,
    })
}
