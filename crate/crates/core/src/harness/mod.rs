//! Experiment orchestration behind the `hazeflow` command line.
//!
//! Each `cmd_*` function is one subcommand. They read and write plain files
//! under the configured work directory and record a [`RunManifest`] per
//! invocation in `<workdir>/manifests/`.

pub mod checkpoint;
mod commands;
pub mod config;
pub mod dataset;
pub mod plot;
mod report;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use commands::{
    cmd_predict, cmd_simulate, cmd_train, read_predictions, LossRow, PredictOutcome, PredictionEntry,
    PredictionsFile, SimulateOutcome, TrainOutcome, LOSS_LOG, PREDICTIONS_FILE,
};
pub use config::{load_config, parse_config, ExperimentConfig, TilingMode};
pub use report::{
    cmd_calibrate, cmd_evaluate, cmd_plot, CalibrationReport, EvaluationReport, RowFlag, TSweepRow,
    CALIBRATION_FILE, EVALUATION_FILE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub signal: u64,
    pub noise: u64,
    pub train: u64,
    pub sample: u64,
}

/// What one command ran with and what it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: SeedRecord,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: Vec<PathBuf>,
}

pub(crate) fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes `<workdir>/manifests/<command>.json` and returns its path.
pub(crate) fn record_run(
    cfg: &ExperimentConfig,
    command: &str,
    started_unix: f64,
    artifacts: Vec<PathBuf>,
) -> Result<PathBuf> {
    let dir = cfg.paths.manifest_dir();
    dataset::create_dir(&dir)?;
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        seeds: SeedRecord {
            signal: cfg.dataset.signal.seed,
            noise: cfg.dataset.noise.seed,
            train: cfg.train.config.seed,
            sample: cfg.sample.seed,
        },
        started_unix,
        finished_unix: unix_now(),
        artifacts,
    };
    let path = dir.join(format!("{command}.json"));
    dataset::write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_run_manifest(path: &Path) -> Result<RunManifest> {
    dataset::read_json(path)
}
