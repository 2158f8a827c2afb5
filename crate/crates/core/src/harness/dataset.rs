//! Paired datasets on disk.
//!
//! Layout: `<dir>/manifest.json` plus `<dir>/<split>/NNNN_hazy.hzr` and
//! `NNNN_clean.hzr`. Signal ids run consecutively over train, val, test.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{compute_norm_stats, NormStats, PairedSample, SimulationSpec};
use crate::raster::Raster;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const DATASET_MANIFEST: &str = "manifest.json";
pub const RASTER_EXT: &str = "hzr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub signal_id: u64,
    pub signal_seed: u64,
    pub hazy: String,
    pub clean: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntries {
    pub name: String,
    pub pairs: Vec<PairEntry>,
}

/// Everything needed to regenerate the dataset. Holds no timestamps, so
/// regenerating it yields identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub simulation: SimulationSpec,
    pub noise_seed: u64,
    pub splits: Vec<SplitEntries>,
    /// Training-split statistics; absent when the train split is empty.
    pub norm_stats: Option<NormStats>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&SplitEntries> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("dataset has no split `{name}`")))
    }

    pub fn all_seeds(&self) -> Vec<u64> {
        self.splits.iter().flat_map(|s| s.pairs.iter().map(|p| p.signal_seed)).collect()
    }
}

pub fn pair_names(signal_id: u64) -> (String, String) {
    (
        format!("{signal_id:04}_hazy.{RASTER_EXT}"),
        format!("{signal_id:04}_clean.{RASTER_EXT}"),
    )
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Renders every split and writes rasters plus the manifest under `dir`.
pub fn write_dataset(dir: &Path, spec: &SimulationSpec, sizes: [usize; 3]) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut next_id = 0u64;
    let mut splits = Vec::new();
    let mut train_pairs: Vec<PairedSample<f32>> = Vec::new();
    for (name, &n) in SPLITS.iter().zip(&sizes) {
        let split_dir = dir.join(name);
        create_dir(&split_dir)?;
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let id = next_id;
            next_id += 1;
            let pair = spec.simulate::<f32>(id)?;
            let (hazy, clean) = pair_names(id);
            pair.hazy.write(&split_dir.join(&hazy))?;
            pair.clean.write(&split_dir.join(&clean))?;
            pairs.push(PairEntry {
                signal_id: id,
                signal_seed: spec.signal_seed(id),
                hazy,
                clean,
            });
            if *name == "train" {
                train_pairs.push(pair);
            }
        }
        splits.push(SplitEntries {
            name: name.to_string(),
            pairs,
        });
    }
    let norm_stats = if train_pairs.is_empty() {
        None
    } else {
        Some(compute_norm_stats(&train_pairs)?)
    };
    let manifest = DatasetManifest {
        simulation: spec.clone(),
        noise_seed: spec.noise.seed,
        splits,
        norm_stats,
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    if !path.exists() {
        return Err(Error::Data(format!("no dataset at {} (run simulate first)", dir.display())));
    }
    read_json(&path)
}

/// All pairs of one split, in manifest order.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, name: &str) -> Result<Vec<PairedSample<f32>>> {
    let split_dir = dir.join(name);
    manifest
        .split(name)?
        .pairs
        .iter()
        .map(|p| {
            Ok(PairedSample {
                hazy: Raster::read(&split_dir.join(&p.hazy))?,
                clean: Raster::read(&split_dir.join(&p.clean))?,
                signal_id: p.signal_id,
            })
        })
        .collect()
}

/// One observation to restore, with its ground truth when known.
#[derive(Clone, Debug, PartialEq)]
pub struct InputImage {
    pub stem: String,
    pub path: PathBuf,
    pub gt: Option<PathBuf>,
}

/// Resolves a raster file or a directory of rasters. In a directory, only
/// hazy members of pairs are taken when pairs are present; a `_hazy` file's
/// ground truth is the sibling `_clean` file.
pub fn list_inputs(path: &Path) -> Result<Vec<InputImage>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == RASTER_EXT))
            .collect();
        v.sort();
        if v.iter().any(|p| stem_of(p).ends_with("_hazy")) {
            v.retain(|p| stem_of(p).ends_with("_hazy"));
        }
        v
    } else if path.is_file() {
        vec![path.to_path_buf()]
    } else {
        return Err(Error::Data(format!("input {} does not exist", path.display())));
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no .{RASTER_EXT} rasters under {}", path.display())));
    }
    Ok(files
        .into_iter()
        .map(|p| {
            let stem = stem_of(&p);
            let gt = stem
                .strip_suffix("_hazy")
                .map(|base| p.with_file_name(format!("{base}_clean.{RASTER_EXT}")))
                .filter(|g| g.is_file());
            InputImage { stem, path: p, gt }
        })
        .collect())
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{NoiseSpec, PsfMode, PsfSpec, SignalSpec, StructureKind};

    fn spec() -> SimulationSpec {
        SimulationSpec {
            signal: SignalSpec {
                width: 32,
                height: 32,
                structure_kind: StructureKind::Blobs,
                object_count_range: [2, 4],
                intensity_range: [20.0, 60.0],
                seed: 3,
            },
            hazy_psf: PsfSpec::new(PsfMode::Widefield, 30.0, 0.6),
            clean_psf: PsfSpec::new(PsfMode::Confocal, 1.0, 0.3),
            noise: NoiseSpec {
                photon_gain: 1.0,
                read_sigma: 1.0,
                seed: 4,
            },
        }
    }

    #[test]
    fn writes_every_split_and_lists_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &spec(), [3, 1, 2]).unwrap();
        assert_eq!(m.all_seeds().len(), 6);
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        let test = load_split(dir.path(), &m, "test").unwrap();
        assert_eq!(test.iter().map(|p| p.signal_id).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(test[0], spec().simulate::<f32>(4).unwrap());
        let inputs = list_inputs(&dir.path().join("test")).unwrap();
        assert_eq!(inputs.len(), 2);
        assert_eq!(inputs[0].stem, "0004_hazy");
        assert!(inputs[0].gt.as_ref().unwrap().ends_with("0004_clean.hzr"));
    }

    #[test]
    fn empty_train_split_has_no_stats() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &spec(), [0, 0, 1]).unwrap();
        assert!(m.norm_stats.is_none());
        assert!(load_split(dir.path(), &m, "train").unwrap().is_empty());
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Data(_))));
        assert!(matches!(list_inputs(&dir.path().join("nope")), Err(Error::Data(_))));
    }
}
