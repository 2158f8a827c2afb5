//! Experiment configuration: one TOML file whose sections mirror the pipeline
//! stages, plus dotted-key overrides and path-only environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::ArchSpec;
use crate::optics::{NoiseSpec, PsfMode, PsfSpec, SignalSpec, SimulationSpec};
use crate::sampler::SamplerConfig;
use crate::tiler::DEFAULT_OVERLAP;
use crate::train::TrainConfig;

pub const ENV_WORKDIR: &str = "HAZEFLOW_WORKDIR";
pub const ENV_DATASET: &str = "HAZEFLOW_DATASET";
pub const ENV_CHECKPOINTS: &str = "HAZEFLOW_CHECKPOINTS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "ArchSpec::tiny")]
    pub arch: ArchSpec,
    #[serde(default)]
    pub sample: SamplerConfig,
    #[serde(default)]
    pub tiling: TilingConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub signal: SignalSpec,
    pub hazy_psf: PsfConfig,
    pub clean_psf: PsfConfig,
    pub noise: NoiseSpec,
    pub splits: SplitSizes,
}

/// PSF settings; the kernel radius is derived from the width when omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsfConfig {
    pub mode: PsfMode,
    pub pinhole_au: f64,
    pub base_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_radius: Option<usize>,
}

impl PsfConfig {
    pub fn resolve(&self) -> PsfSpec {
        let mut spec = PsfSpec::new(self.mode, self.pinhole_au, self.base_sigma);
        if let Some(r) = self.kernel_radius {
            spec.kernel_radius = r;
        }
        spec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// The training hyperparameters plus checkpoint scheduling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Batches of the val split averaged for model selection.
    #[serde(default = "default_val_batches")]
    pub val_batches: u64,
}

fn default_checkpoint_every() -> u64 {
    500
}

fn default_val_batches() -> u64 {
    4
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            config: TrainConfig::default(),
            checkpoint_every: default_checkpoint_every(),
            val_batches: default_val_batches(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TilingMode {
    /// Overlapping tiles, keeping each tile's centre.
    #[default]
    Inner,
    /// The whole frame in one pass.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub tile: usize,
    pub overlap: f64,
    pub mode: TilingMode,
    /// Accept a tile size different from the training patch size.
    pub allow_mismatch: bool,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            tile: 64,
            overlap: DEFAULT_OVERLAP,
            mode: TilingMode::Inner,
            allow_mismatch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_bins: usize,
    /// Split whose predictions the fit is computed on.
    pub fit_split: String,
    /// Split the fitted correction is applied to.
    pub apply_split: String,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            n_bins: crate::calibration::DEFAULT_BINS,
            fit_split: "val".into(),
            apply_split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Sample counts for the prefix sweep; values above the stored k are skipped.
    pub k_list: Vec<usize>,
    /// Step counts for the re-sampling sweep (needs a checkpoint).
    pub t_list: Vec<usize>,
    pub t_sweep_samples: usize,
    /// Fixed PSNR peak; the ground truth's own range when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_range: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            k_list: vec![1, 2, 5, 10, 20, 50],
            t_list: Vec::new(),
            t_sweep_samples: 10,
            data_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub workdir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            workdir: PathBuf::from("runs/default"),
            dataset: None,
            checkpoints: None,
        }
    }
}

impl PathsConfig {
    pub fn dataset_dir(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.workdir.join("dataset"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoints.clone().unwrap_or_else(|| self.workdir.join("checkpoints"))
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.workdir.join("manifests")
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Validation(msg) => Error::Config(msg),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn simulation(&self) -> SimulationSpec {
        SimulationSpec {
            signal: self.dataset.signal.clone(),
            hazy_psf: self.dataset.hazy_psf.resolve(),
            clean_psf: self.dataset.clean_psf.resolve(),
            noise: self.dataset.noise.clone(),
        }
    }

    /// Cross-field checks; every failure is a [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.simulation().validate().map_err(config_err)?;
        self.arch.validate().map_err(config_err)?;
        let train = &self.train.config;
        train.validate(&self.arch)?;
        self.sample.validate()?;
        let sig = &self.dataset.signal;
        if train.patch_size > sig.width.min(sig.height) {
            return Err(Error::Config(format!(
                "patch_size {} exceeds the simulated image size {}x{}",
                train.patch_size, sig.height, sig.width
            )));
        }
        if self.tiling.tile != train.patch_size && !self.tiling.allow_mismatch {
            return Err(Error::Config(format!(
                "tile size {} differs from the training patch size {}; set tiling.allow_mismatch to accept",
                self.tiling.tile, train.patch_size
            )));
        }
        if self.tiling.tile == 0 || !self.tiling.tile.is_multiple_of(self.arch.size_multiple()) {
            return Err(Error::Config(format!(
                "tile size {} must be a positive multiple of {}",
                self.tiling.tile,
                self.arch.size_multiple()
            )));
        }
        if !(0.0..1.0).contains(&self.tiling.overlap) {
            return Err(Error::Config(format!("overlap must lie in [0, 1), got {}", self.tiling.overlap)));
        }
        if self.sample.coupling != train.coupling {
            return Err(Error::Config("sample.coupling must match train.coupling".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config("train.checkpoint_every must be >= 1".into()));
        }
        if self.calibration.n_bins == 0 {
            return Err(Error::Config("calibration.n_bins must be >= 1".into()));
        }
        if self.evaluation.k_list.contains(&0) || self.evaluation.t_list.contains(&0) {
            return Err(Error::Config("sweep lists must not contain 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }
}

/// Parses a config from TOML text after applying `key.path=value` overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

/// Loads a config from a `.toml` file or from the config snapshot inside a
/// run manifest (`.json`), then applies overrides, environment path
/// overrides and validation.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let text = if path.extension().is_some_and(|e| e == "json") {
        let manifest: super::RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        manifest.config.to_toml()
    } else {
        text
    };
    let mut cfg = parse_config(&text, overrides)?;
    apply_env(&mut cfg, |k| std::env::var_os(k));
    cfg.validate()?;
    Ok(cfg)
}

/// Path overrides from the environment; nothing else may be set this way.
pub fn apply_env(cfg: &mut ExperimentConfig, get: impl Fn(&str) -> Option<std::ffi::OsString>) {
    if let Some(v) = get(ENV_WORKDIR) {
        cfg.paths.workdir = v.into();
    }
    if let Some(v) = get(ENV_DATASET) {
        cfg.paths.dataset = Some(v.into());
    }
    if let Some(v) = get(ENV_CHECKPOINTS) {
        cfg.paths.checkpoints = Some(v.into());
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}
