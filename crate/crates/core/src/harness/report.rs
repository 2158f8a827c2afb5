use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::commands::{load_model, posterior_raw, read_predictions, LossRow, PredictionEntry, LOSS_LOG};
use super::config::ExperimentConfig;
use super::dataset::{create_dir, read_json, write_json};
use super::plot::{LinePlot, Series};
use super::{record_run, unix_now};
use crate::calibration::{
    apply_calibration, build_curve, fit_calibration, spearman, sweep_from_posteriors, CalibrationCurve,
    CalibrationFit, SweepRow,
};
use crate::error::{Error, Result};
use crate::metrics::{psnr_affine, MetricReport};
use crate::raster::Raster;
use crate::sampler::{PosteriorSet, SamplerConfig};

pub const CALIBRATION_FILE: &str = "calibration.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

/// Curve and fit live in normalized units; `std_calibrated.hzr` maps are
/// written back in raw intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub predictions: PathBuf,
    pub k: usize,
    pub n_bins: usize,
    pub curve: CalibrationCurve,
    pub fit: CalibrationFit,
    /// Rank correlation between per-bin RMV and RMSE.
    pub spearman: f64,
    pub flags: Vec<String>,
}

fn require_gt(e: &PredictionEntry) -> Result<&Path> {
    e.gt.as_deref()
        .ok_or_else(|| Error::Data(format!("no ground truth known for {}", e.stem)))
}

fn calibration_plot(report: &CalibrationReport) -> LinePlot {
    let c = &report.curve;
    let top = c.rmv.iter().chain(&c.rmse).fold(0.0f64, |a, &b| a.max(b));
    let lo = c.rmv.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = c.rmv.iter().copied().fold(0.0f64, f64::max);
    let (a, b) = (report.fit.alpha, report.fit.beta);
    LinePlot {
        title: format!("Calibration (k = {}, {} bins)", report.k, report.n_bins),
        x_label: "RMV".into(),
        y_label: "RMSE".into(),
        log_x: false,
        series: vec![
            Series::line("bins", c.rmv.iter().copied().zip(c.rmse.iter().copied()).collect()).with_markers(),
            Series::line(format!("fit {a:.3} x + {b:.3}"), vec![(lo, a * lo + b), (hi, a * hi + b)]),
            Series::line("y = x", vec![(0.0, 0.0), (top, top)]).dashed(),
        ],
    }
}

/// Bins the pixels of every prediction in `predictions` by predicted
/// spread, fits the RMSE-vs-RMV line, and writes `calibration.json` and
/// `calibration.svg` to `out`. With `apply_to`, the fitted map is applied to
/// another prediction folder as `std_calibrated.hzr`.
pub fn cmd_calibrate(
    cfg: &ExperimentConfig,
    predictions: &Path,
    out: &Path,
    apply_to: Option<&Path>,
) -> Result<CalibrationReport> {
    let started = unix_now();
    let index = read_predictions(predictions)?;
    if index.entries.is_empty() {
        return Err(Error::Data("prediction set is empty".into()));
    }
    let clean = index.norm_stats.clean;
    let scale = clean.std as f32;
    let (mut stds, mut mmses, mut gts) = (Vec::new(), Vec::new(), Vec::new());
    for e in &index.entries {
        let gt = Raster::<f32>::read(require_gt(e)?)?;
        stds.push(Raster::<f32>::read(&e.std_path())?.map(|v| v / scale));
        mmses.push(clean.normalize(&Raster::<f32>::read(&e.mmse_path())?));
        gts.push(clean.normalize(&gt));
    }
    if stds.iter().all(|s| s.as_slice().iter().all(|&v| v == 0.0)) {
        return Err(Error::Calibration(format!(
            "pixel_std is identically zero (k = {}); calibration needs at least 2 samples per input",
            index.sampler.n_samples
        )));
    }
    let n_bins = cfg.calibration.n_bins;
    let curve = build_curve(&stds, &mmses, &gts, n_bins)?;
    let fit = fit_calibration(&curve)?;
    let mut flags = Vec::new();
    if fit.alpha_clamped {
        flags.push("alpha clamped at its lower bound: spread and error are not positively related".into());
    }
    let report = CalibrationReport {
        predictions: predictions.to_path_buf(),
        k: index.sampler.n_samples,
        n_bins,
        spearman: spearman(&curve.rmv, &curve.rmse),
        curve,
        fit,
        flags,
    };
    create_dir(out)?;
    let json = out.join(CALIBRATION_FILE);
    write_json(&json, &report)?;
    let svg = out.join("calibration.svg");
    calibration_plot(&report).write(&svg)?;
    let mut artifacts = vec![json, svg];
    if let Some(target) = apply_to {
        let target = read_predictions(target)?;
        let scale = target.norm_stats.clean.std as f32;
        for e in target.entries {
            let std = Raster::<f32>::read(&e.std_path())?.map(|v| v / scale);
            let path = e.dir.join("std_calibrated.hzr");
            apply_calibration(&std, &report.fit).map(|v| v * scale).write(&path)?;
            artifacts.push(path);
        }
    }
    record_run(cfg, "calibrate", started, artifacts)?;
    Ok(report)
}

/// An image left out of the metrics, and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowFlag {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TSweepRow {
    pub steps_t: usize,
    pub k: usize,
    pub psnr_mmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub predictions: PathBuf,
    /// MMSE estimate against ground truth.
    pub mmse: MetricReport,
    /// The hazy input itself scored as a prediction; rows are labelled
    /// `input-psnr:<stem>`.
    pub input: MetricReport,
    /// Mean affine PSNR of the MMSE minus that of the input.
    pub uplift_db: f64,
    pub flagged: Vec<RowFlag>,
    pub k_sweep: Vec<SweepRow>,
    pub t_sweep: Vec<TSweepRow>,
}

struct Scored {
    entry: PredictionEntry,
    gt: Raster<f32>,
}

fn score_entry(
    e: &PredictionEntry,
    range: Option<f64>,
    mmse: &mut MetricReport,
    input: &mut MetricReport,
) -> Result<Raster<f32>> {
    let gt = Raster::<f32>::read(require_gt(e)?)?;
    let pred = Raster::<f32>::read(&e.mmse_path())?;
    let hazy = Raster::<f32>::read(&e.input)?;
    pred.ensure_same_shape(&gt)?;
    hazy.ensure_same_shape(&gt)?;
    // score both into scratch reports first so a failure leaves neither half-filled
    let (mut m, mut i) = (mmse.clone(), input.clone());
    m.push(e.stem.clone(), &pred, &gt, range)?;
    i.push(format!("input-psnr:{}", e.stem), &hazy, &gt, range)?;
    *mmse = m;
    *input = i;
    Ok(gt)
}

fn sweep_plot(title: &str, x_label: &str, log_x: bool, points: Vec<(f64, f64)>) -> LinePlot {
    LinePlot {
        title: title.into(),
        x_label: x_label.into(),
        y_label: "PSNR of MMSE (dB, affine)".into(),
        log_x,
        series: vec![Series::line("mean over images", points).with_markers()],
    }
}

/// Scores the MMSE estimates and inputs of a prediction folder against
/// ground truth, sweeps sample counts over stored sample prefixes and, with
/// a checkpoint, re-samples at every `evaluation.t_list` step count. Images
/// that cannot be scored are flagged and skipped.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    predictions: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<EvaluationReport> {
    let started = unix_now();
    let index = read_predictions(predictions)?;
    let ev = &cfg.evaluation;
    let (mut mmse, mut input) = (MetricReport::default(), MetricReport::default());
    let mut flagged = Vec::new();
    let mut scored = Vec::new();
    for e in &index.entries {
        match score_entry(e, ev.data_range, &mut mmse, &mut input) {
            Ok(gt) => scored.push(Scored { entry: e.clone(), gt }),
            Err(err @ (Error::Io { .. } | Error::Incompatible(_))) => return Err(err),
            Err(err) => flagged.push(RowFlag {
                id: e.stem.clone(),
                reason: err.to_string(),
            }),
        }
    }
    let uplift_db = mmse.aggregate.psnr_affine.mean - input.aggregate.psnr_affine.mean;

    let mut k_sweep = Vec::new();
    let k_avail = scored.iter().map(|s| s.entry.k).min().unwrap_or(0);
    let mut ks: Vec<usize> = ev.k_list.iter().copied().filter(|&k| k <= k_avail).collect();
    ks.sort_unstable();
    ks.dedup();
    if !ks.is_empty() {
        let k_max = *ks.last().expect("non-empty");
        let posteriors = scored
            .iter()
            .map(|s| s.entry.load_posterior(k_max))
            .collect::<Result<Vec<PosteriorSet<f32>>>>()?;
        let gts: Vec<Raster<f32>> = scored.iter().map(|s| s.gt.clone()).collect();
        k_sweep = sweep_from_posteriors(&posteriors, &gts, &ks, cfg.calibration.n_bins)?;
    }

    let mut t_sweep = Vec::new();
    if let (Some(ckpt), false) = (checkpoint, ev.t_list.is_empty() || scored.is_empty()) {
        let (net, stats) = load_model(cfg, ckpt)?;
        for &steps_t in &ev.t_list {
            let sampler = SamplerConfig {
                steps_t,
                n_samples: ev.t_sweep_samples,
                ..cfg.sample.clone()
            };
            let mut total = 0.0;
            for s in &scored {
                let hazy = Raster::<f32>::read(&s.entry.input)?;
                let post = posterior_raw(&net, cfg, &sampler, &stats, &hazy, &s.entry.stem)?;
                total += psnr_affine(&post.mmse, &s.gt)?;
            }
            t_sweep.push(TSweepRow {
                steps_t,
                k: ev.t_sweep_samples,
                psnr_mmse: total / scored.len() as f64,
            });
        }
    }

    let report = EvaluationReport {
        predictions: predictions.to_path_buf(),
        mmse,
        input,
        uplift_db,
        flagged,
        k_sweep,
        t_sweep,
    };
    create_dir(out)?;
    let mut artifacts = write_evaluation(&report, out)?;
    let json = out.join(EVALUATION_FILE);
    write_json(&json, &report)?;
    artifacts.push(json);
    record_run(cfg, "evaluate", started, artifacts)?;
    Ok(report)
}

fn write_evaluation(report: &EvaluationReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut csv = String::from("id,psnr_affine,psnr_fixed,mse\n");
    for r in report.mmse.per_image.iter().chain(&report.input.per_image) {
        csv.push_str(&format!("{},{},{},{}\n", r.id, r.psnr_affine, r.psnr_fixed, r.mse));
    }
    let path = out.join("metrics.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let mut written = vec![path];
    written.extend(evaluation_plots(report, out)?);
    Ok(written)
}

fn evaluation_plots(report: &EvaluationReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if !report.k_sweep.is_empty() {
        let pts = report.k_sweep.iter().map(|r| (r.k as f64, r.psnr_mmse)).collect();
        let path = out.join("k_sweep.svg");
        sweep_plot("PSNR vs. number of samples", "k (samples)", true, pts).write(&path)?;
        written.push(path);
    }
    if !report.t_sweep.is_empty() {
        let pts = report.t_sweep.iter().map(|r| (r.steps_t as f64, r.psnr_mmse)).collect();
        let path = out.join("t_sweep.svg");
        sweep_plot("PSNR vs. Euler steps", "T (steps)", true, pts).write(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn loss_plot(rows: &[LossRow]) -> LinePlot {
    const WINDOW: usize = 50;
    let raw: Vec<(f64, f64)> = rows.iter().map(|r| (r.iteration as f64, r.loss)).collect();
    let smooth = rows
        .windows(WINDOW.min(rows.len()).max(1))
        .map(|w| {
            let last = w.last().expect("non-empty window");
            (last.iteration as f64, w.iter().map(|r| r.loss).sum::<f64>() / w.len() as f64)
        })
        .collect();
    LinePlot {
        title: "Training loss".into(),
        x_label: "iteration".into(),
        y_label: "flow-matching loss".into(),
        log_x: false,
        series: vec![
            Series::line("per step", raw),
            Series::line(format!("mean of last {WINDOW}"), smooth),
        ],
    }
}

/// Re-renders plots from a loss log, a calibration report or an evaluation
/// report. A directory is searched for all three.
pub fn cmd_plot(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let files: Vec<PathBuf> = if input.is_dir() {
        [LOSS_LOG, CALIBRATION_FILE, EVALUATION_FILE]
            .iter()
            .map(|f| input.join(f))
            .filter(|p| p.is_file())
            .collect()
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("nothing to plot in {}", input.display())));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.ends_with(".csv") {
            let path = out.join("loss.svg");
            loss_plot(&LossRow::read_log(&f)?).write(&path)?;
            written.push(path);
        } else if let Ok(report) = read_json::<CalibrationReport>(&f) {
            let path = out.join("calibration.svg");
            calibration_plot(&report).write(&path)?;
            written.push(path);
        } else if let Ok(report) = read_json::<EvaluationReport>(&f) {
            written.extend(evaluation_plots(&report, out)?);
        } else {
            return Err(Error::Data(format!("{} is not a loss log or report", f.display())));
        }
    }
    Ok(written)
}
