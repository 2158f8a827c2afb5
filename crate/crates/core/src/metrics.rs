//! PSNR variants used for evaluation.
//!
//! `psnr_affine` first fits `a * pred + b` to the ground truth by least
//! squares, which makes it insensitive to the arbitrary offset and scale of
//! microscopy intensities. The peak is the dynamic range of the ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scalar::Real;

/// Value reported for an exact match.
pub const PSNR_CAP_DB: f64 = 150.0;

fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (-10.0 * (mse / (range * range)).log10()).min(PSNR_CAP_DB)
}

pub fn mse<T: Real>(pred: &Raster<T>, gt: &Raster<T>) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    Ok(pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(&p, &g)| (p.f64() - g.f64()).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// PSNR against a fixed `data_range`.
pub fn psnr_fixed<T: Real>(pred: &Raster<T>, gt: &Raster<T>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::validation(format!("data range must be positive, got {data_range}")));
    }
    Ok(psnr_from_mse(mse(pred, gt)?, data_range))
}

/// Dynamic range `max - min` of `gt`; constant images are rejected.
pub fn data_range<T: Real>(gt: &Raster<T>) -> Result<f64> {
    let (lo, hi) = gt.min_max();
    let range = hi.f64() - lo.f64();
    if !(range > 0.0) {
        return Err(Error::validation("ground truth is constant; PSNR range is undefined"));
    }
    Ok(range)
}

/// Least-squares `(a, b)` minimizing `||a * pred + b - gt||^2`.
pub fn affine_fit<T: Real>(pred: &Raster<T>, gt: &Raster<T>) -> Result<(f64, f64)> {
    pred.ensure_same_shape(gt)?;
    let n = pred.len() as f64;
    let mp = pred.as_slice().iter().map(|v| v.f64()).sum::<f64>() / n;
    let mg = gt.as_slice().iter().map(|v| v.f64()).sum::<f64>() / n;
    let (mut spp, mut spg) = (0.0, 0.0);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let dp = p.f64() - mp;
        spp += dp * dp;
        spg += dp * (g.f64() - mg);
    }
    let a = if spp > 0.0 { spg / spp } else { 0.0 };
    Ok((a, mg - a * mp))
}

pub fn psnr_affine<T: Real>(pred: &Raster<T>, gt: &Raster<T>) -> Result<f64> {
    let range = data_range(gt)?;
    let (a, b) = affine_fit(pred, gt)?;
    let mse = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(&p, &g)| (a * p.f64() + b - g.f64()).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(psnr_from_mse(mse, range))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_affine: f64,
    pub psnr_fixed: f64,
    pub mse: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return MeanStd::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_affine: MeanStd,
    pub psnr_fixed: MeanStd,
    pub mse: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    /// Evaluates `pred` against `gt`; the fixed-range PSNR uses each target's
    /// own dynamic range unless `data_range` is given.
    pub fn push<T: Real>(&mut self, id: impl Into<String>, pred: &Raster<T>, gt: &Raster<T>, data_range_override: Option<f64>) -> Result<()> {
        let range = match data_range_override {
            Some(r) => r,
            None => data_range(gt)?,
        };
        self.per_image.push(MetricRow {
            id: id.into(),
            psnr_affine: psnr_affine(pred, gt)?,
            psnr_fixed: psnr_fixed(pred, gt, range)?,
            mse: mse(pred, gt)?,
        });
        self.recompute();
        Ok(())
    }

    pub fn recompute(&mut self) {
        self.aggregate = Aggregate {
            psnr_affine: MeanStd::of(self.per_image.iter().map(|r| r.psnr_affine)),
            psnr_fixed: MeanStd::of(self.per_image.iter().map(|r| r.psnr_fixed)),
            mse: MeanStd::of(self.per_image.iter().map(|r| r.mse)),
        };
    }
}
