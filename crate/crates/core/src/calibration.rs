//! Uncertainty calibration: binned RMV against RMSE and a positive linear fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr_affine;
use crate::net::VelocityModel;
use crate::raster::Raster;
use crate::sampler::{sample_posterior, PosteriorSet, SamplerConfig};
use crate::scalar::Real;

pub const DEFAULT_BINS: usize = 50;
pub const MIN_ALPHA: f64 = 1e-6;

/// Per-bin root mean variance and root mean squared error, bins ordered by
/// predicted standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub n_bins: usize,
    pub rmv: Vec<f64>,
    pub rmse: Vec<f64>,
    /// `n_bins + 1` sigma values: the first sigma of every bin, then the
    /// largest sigma overall.
    pub bin_edges: Vec<f64>,
    pub bin_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub alpha: f64,
    pub beta: f64,
    /// Sum of squared residuals of the curve around the fitted line.
    pub fit_residual: f64,
    /// The unconstrained slope was not positive and `alpha` sits at
    /// [`MIN_ALPHA`].
    pub alpha_clamped: bool,
}

impl CalibrationFit {
    pub fn residual(&self, curve: &CalibrationCurve) -> f64 {
        residual(curve, self.alpha, self.beta)
    }
}

fn residual(curve: &CalibrationCurve, alpha: f64, beta: f64) -> f64 {
    curve
        .rmv
        .iter()
        .zip(&curve.rmse)
        .map(|(&x, &y)| (y - alpha * x - beta).powi(2))
        .sum()
}

/// Pools every pixel of every image, sorts by sigma (ties broken by pixel
/// order) and splits into `n_bins` bins whose sizes differ by at most one.
pub fn build_curve<T: Real>(
    pixel_std: &[Raster<T>],
    mmse: &[Raster<T>],
    gt: &[Raster<T>],
    n_bins: usize,
) -> Result<CalibrationCurve> {
    if pixel_std.len() != mmse.len() || mmse.len() != gt.len() {
        return Err(Error::validation(format!(
            "mismatched image counts: {} std maps, {} predictions, {} targets",
            pixel_std.len(),
            mmse.len(),
            gt.len()
        )));
    }
    if n_bins < 2 {
        return Err(Error::validation("calibration needs at least 2 bins"));
    }
    let mut pixels: Vec<(f64, f64)> = Vec::new();
    for ((s, m), g) in pixel_std.iter().zip(mmse).zip(gt) {
        s.ensure_same_shape(m)?;
        m.ensure_same_shape(g)?;
        for ((&s, &m), &g) in s.as_slice().iter().zip(m.as_slice()).zip(g.as_slice()) {
            let e = m.f64() - g.f64();
            pixels.push((s.f64(), e * e));
        }
    }
    let n = pixels.len();
    if n < n_bins {
        return Err(Error::validation(format!("{n} pixels cannot fill {n_bins} bins")));
    }
    if pixels.iter().any(|&(s, e)| !s.is_finite() || !e.is_finite()) {
        return Err(Error::Data("non-finite sigma or error in calibration input".into()));
    }
    // sort_by is stable, so equal sigmas keep pixel order
    pixels.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut curve = CalibrationCurve {
        n_bins,
        rmv: Vec::with_capacity(n_bins),
        rmse: Vec::with_capacity(n_bins),
        bin_edges: Vec::with_capacity(n_bins + 1),
        bin_sizes: Vec::with_capacity(n_bins),
    };
    for j in 0..n_bins {
        let (lo, hi) = (j * n / n_bins, (j + 1) * n / n_bins);
        let bin = &pixels[lo..hi];
        let size = bin.len() as f64;
        curve.rmv.push((bin.iter().map(|p| p.0 * p.0).sum::<f64>() / size).sqrt());
        curve.rmse.push((bin.iter().map(|p| p.1).sum::<f64>() / size).sqrt());
        curve.bin_edges.push(bin[0].0);
        curve.bin_sizes.push(bin.len());
    }
    curve.bin_edges.push(pixels[n - 1].0);
    Ok(curve)
}

/// Least-squares line `rmse = alpha * rmv + beta` with `alpha >= MIN_ALPHA`.
pub fn fit_calibration(curve: &CalibrationCurve) -> Result<CalibrationFit> {
    let n = curve.rmv.len();
    if n == 0 || n != curve.rmse.len() {
        return Err(Error::Calibration("curve is empty or ragged".into()));
    }
    let nf = n as f64;
    let mx = curve.rmv.iter().sum::<f64>() / nf;
    let my = curve.rmse.iter().sum::<f64>() / nf;
    let sxx: f64 = curve.rmv.iter().map(|&x| (x - mx).powi(2)).sum();
    let sxy: f64 = curve.rmv.iter().zip(&curve.rmse).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    if !(sxx > 1e-24 * (1.0 + mx * mx) * nf) {
        return Err(Error::Calibration(
            "predicted standard deviations carry no spread across bins; the fit is undetermined".into(),
        ));
    }
    let slope = sxy / sxx;
    let (alpha, beta, clamped) = if slope >= MIN_ALPHA {
        (slope, my - slope * mx, false)
    } else {
        (MIN_ALPHA, my - MIN_ALPHA * mx, true)
    };
    Ok(CalibrationFit {
        alpha,
        beta,
        fit_residual: residual(curve, alpha, beta),
        alpha_clamped: clamped,
    })
}

/// `alpha * sigma + beta`, pixel-wise.
pub fn apply_calibration<T: Real>(pixel_std: &Raster<T>, fit: &CalibrationFit) -> Raster<T> {
    let (a, b) = (T::of(fit.alpha), T::of(fit.beta));
    pixel_std.map(|s| a * s + b)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    pearson(&rx, &ry)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// One row of the sample-count sweep. A failed fit leaves `fit` empty and
/// records why in `flag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub fit: Option<CalibrationFit>,
    pub psnr_mmse: f64,
    pub flag: Option<String>,
}

/// Calibration and MMSE PSNR for every k in `k_list`, from posterior sets
/// already drawn with at least `max(k_list)` samples.
pub fn sweep_from_posteriors<T: Real>(
    posteriors: &[PosteriorSet<T>],
    gt: &[Raster<T>],
    k_list: &[usize],
    n_bins: usize,
) -> Result<Vec<SweepRow>> {
    if posteriors.len() != gt.len() || posteriors.is_empty() {
        return Err(Error::validation("sweep needs one ground truth per posterior set"));
    }
    if k_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::validation("k_list must be sorted"));
    }
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let sets = posteriors.iter().map(|p| p.prefix(k)).collect::<Result<Vec<_>>>()?;
        let mut psnr = 0.0;
        for (p, g) in sets.iter().zip(gt) {
            psnr += psnr_affine(&p.mmse, g)?;
        }
        psnr /= sets.len() as f64;
        let stds: Vec<_> = sets.iter().map(|p| p.pixel_std.clone()).collect();
        let mmses: Vec<_> = sets.iter().map(|p| p.mmse.clone()).collect();
        let (fit, flag) = match build_curve(&stds, &mmses, gt, n_bins).and_then(|c| fit_calibration(&c)) {
            Ok(f) if f.alpha_clamped => (Some(f), Some("alpha clamped at its lower bound".to_string())),
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(SweepRow {
            k,
            fit,
            psnr_mmse: psnr,
            flag,
        });
    }
    Ok(rows)
}

/// Draws `max(k_list)` samples per observation and sweeps over prefixes.
pub fn sample_efficiency_sweep<T: Real, M: VelocityModel<T> + ?Sized>(
    field: &M,
    dataset: &[(Raster<T>, Raster<T>)],
    k_list: &[usize],
    sampler: &SamplerConfig,
    n_bins: usize,
) -> Result<Vec<SweepRow>> {
    let k_max = *k_list.iter().max().ok_or_else(|| Error::validation("empty k_list"))?;
    let cfg = SamplerConfig {
        n_samples: k_max,
        ..sampler.clone()
    };
    let mut posteriors = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    for (i, (cond, gt)) in dataset.iter().enumerate() {
        posteriors.push(sample_posterior(field, cond, &cfg, &i.to_string())?);
        gts.push(gt.clone());
    }
    sweep_from_posteriors(&posteriors, &gts, k_list, n_bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_raster, rng_from_seed};
    use crate::sampler::FieldFn;
    use proptest::prelude::*;
    use rand::Rng;

    fn curve(rmv: Vec<f64>, rmse: Vec<f64>) -> CalibrationCurve {
        let n = rmv.len();
        CalibrationCurve {
            n_bins: n,
            bin_edges: vec![0.0; n + 1],
            bin_sizes: vec![1; n],
            rmv,
            rmse,
        }
    }

    /// Perfectly calibrated generator: error at each pixel is N(0, sigma^2).
    fn calibrated_oracle(n: usize, seed: u64) -> (Raster<f64>, Raster<f64>, Raster<f64>) {
        let mut rng = rng_from_seed(seed);
        let sigma = Raster::from_fn(1, n, |_, _| rng.random_range(0.1..1.0));
        let gt = normal_raster::<f64, _>(1, n, &mut rng);
        let z = normal_raster::<f64, _>(1, n, &mut rng);
        let pred = Raster::from_fn(1, n, |_, c| gt.get(0, c) + sigma.get(0, c) * z.get(0, c));
        (sigma, pred, gt)
    }

    #[test]
    fn constant_inputs() {
        let s = Raster::filled(10, 10, 2.0f64);
        let gt = Raster::zeros(10, 10);
        let pred = Raster::filled(10, 10, 2.0);
        let c = build_curve(&[s], &[pred], std::slice::from_ref(&gt), 5).unwrap();
        assert!(c.rmv.iter().chain(&c.rmse).all(|&v| (v - 2.0).abs() < 1e-12));

        let zero = Raster::zeros(10, 10);
        let c = build_curve(&[zero], &[Raster::filled(10, 10, 0.5)], &[gt], 5).unwrap();
        assert!(c.rmv.iter().all(|&v| v == 0.0) && c.rmse.iter().all(|&v| v > 0.0));
        assert!(fit_calibration(&c).is_err());
    }

    #[test]
    fn too_few_pixels() {
        let r = Raster::<f32>::zeros(2, 2);
        assert!(build_curve(std::slice::from_ref(&r), std::slice::from_ref(&r), std::slice::from_ref(&r), 5).is_err());
    }

    #[test]
    fn calibrated_oracle_is_recovered() {
        let (s, p, g) = calibrated_oracle(1_000_000, 17);
        let c = build_curve(std::slice::from_ref(&s), &[p], &[g], DEFAULT_BINS).unwrap();
        for (v, e) in c.rmv.iter().zip(&c.rmse) {
            assert!((e / v - 1.0).abs() < 0.05, "rmv {v} rmse {e}");
        }
        let f = fit_calibration(&c).unwrap();
        assert!((0.9..=1.1).contains(&f.alpha), "alpha {}", f.alpha);
        assert!((-0.05..=0.05).contains(&f.beta), "beta {}", f.beta);
        assert!(!f.alpha_clamped);

        // calibrated map binned the same way tracks the rmse column
        let cal = apply_calibration(&s, &f);
        let mut sorted: Vec<f64> = cal.as_slice().to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        for j in 0..DEFAULT_BINS {
            let bin = &sorted[j * n / DEFAULT_BINS..(j + 1) * n / DEFAULT_BINS];
            let m = (bin.iter().map(|v| v * v).sum::<f64>() / bin.len() as f64).sqrt();
            assert!((m / c.rmse[j] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn exact_lines() {
        let x = vec![0.1, 0.2, 0.5, 0.9];
        let f = fit_calibration(&curve(x.clone(), x.clone())).unwrap();
        assert!((f.alpha - 1.0).abs() < 1e-12 && f.beta.abs() < 1e-12);
        let y = x.iter().map(|v| 2.0 * v + 0.1).collect();
        let f = fit_calibration(&curve(x, y)).unwrap();
        assert!((f.alpha - 2.0).abs() < 1e-12 && (f.beta - 0.1).abs() < 1e-12);
    }

    #[test]
    fn anti_correlated_curve_clamps() {
        // OLS slope by hand: x mean 2, y mean 2, sxy = -2, sxx = 2 -> -1
        let f = fit_calibration(&curve(vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0])).unwrap();
        assert!(f.alpha_clamped);
        assert_eq!(f.alpha, MIN_ALPHA);
        assert!((f.beta - (2.0 - MIN_ALPHA * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn apply_cases() {
        let s = Raster::from_fn(3, 3, |r, c| (r + c) as f32 * 0.1);
        let id = CalibrationFit {
            alpha: 1.0,
            beta: 0.0,
            fit_residual: 0.0,
            alpha_clamped: false,
        };
        assert_eq!(apply_calibration(&s, &id), s);
        let shift = CalibrationFit { beta: 0.3, ..id };
        let z = Raster::<f32>::zeros(2, 2);
        assert!(apply_calibration(&z, &shift).as_slice().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 4.0, 9.0, 16.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sample_count_is_flagged() {
        let field = FieldFn(|_t: f64, x: &Raster<f64>, _: &Raster<f64>| x.clone());
        let data = vec![(Raster::zeros(8, 8), Raster::from_fn(8, 8, |r, c| (r + c) as f64))];
        let cfg = SamplerConfig {
            steps_t: 2,
            ..Default::default()
        };
        let rows = sample_efficiency_sweep(&field, &data, &[1], &cfg, 4).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].fit.is_none());
        assert!(rows[0].flag.is_some());
    }

    #[test]
    fn calibrated_stub_posterior_has_unit_slope() {
        // one Euler step of v = mu + (s - 1) x maps x0 to mu + s x0, an exact
        // N(mu, s^2) posterior; gt is one more independent draw from it.
        // Population std then gives rmse / rmv = sqrt((k + 1) / (k - 1)).
        let (h, w) = (32, 32);
        let mut rng = rng_from_seed(8);
        let scale = Raster::from_fn(h, w, |_, _| rng.random_range(0.1..1.0));
        let s2 = scale.clone();
        let field = FieldFn(move |_t: f64, x: &Raster<f64>, mu: &Raster<f64>| {
            Raster::from_fn(x.height(), x.width(), |r, c| mu.get(r, c) + (s2.get(r, c) - 1.0) * x.get(r, c))
        });
        let data: Vec<_> = (0..16)
            .map(|_| {
                let mu = normal_raster::<f64, _>(h, w, &mut rng);
                let z = normal_raster::<f64, _>(h, w, &mut rng);
                let gt = Raster::from_fn(h, w, |r, c| mu.get(r, c) + scale.get(r, c) * z.get(r, c));
                (mu, gt)
            })
            .collect();
        let cfg = SamplerConfig {
            steps_t: 1,
            seed: 3,
            ..Default::default()
        };
        let rows = sample_efficiency_sweep(&field, &data, &[50], &cfg, DEFAULT_BINS).unwrap();
        let alpha = rows[0].fit.as_ref().unwrap().alpha;
        assert!((alpha - 1.0).abs() < 0.1, "alpha {alpha}");
    }

    proptest! {
        #[test]
        fn bins_are_balanced_and_ordered(n in 10usize..400, bins in 2usize..10, seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let s = Raster::from_fn(1, n, |_, _| (rng.random_range(0..6) as f64) * 0.2);
            let p = normal_raster::<f64, _>(1, n, &mut rng);
            let g = Raster::zeros(1, n);
            let c = build_curve(&[s], &[p], &[g], bins).unwrap();
            let (lo, hi) = (c.bin_sizes.iter().min().unwrap(), c.bin_sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(c.bin_sizes.iter().sum::<usize>(), n);
            prop_assert!(c.rmv.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn fit_is_locally_optimal(ys in prop::collection::vec(0.0f64..2.0, 6), xs in prop::collection::vec(0.0f64..1.0, 6)) {
            let mut rmv = xs.clone();
            rmv.sort_by(f64::total_cmp);
            prop_assume!(rmv[5] - rmv[0] > 1e-3);
            let c = curve(rmv, ys);
            let f = fit_calibration(&c).unwrap();
            let base = f.residual(&c);
            for (da, db) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                let a = f.alpha + da;
                if a < MIN_ALPHA { continue; }
                prop_assert!(residual(&c, a, f.beta + db) >= base - 1e-12);
            }
        }

        #[test]
        fn calibration_leaves_predictions_alone(alpha in 0.1f64..3.0, beta in -1.0f64..1.0) {
            let mmse = Raster::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
            let std = mmse.map(|v| v * 0.01);
            let before = (mmse.clone(), std.clone());
            let fit = CalibrationFit { alpha, beta, fit_residual: 0.0, alpha_clamped: false };
            let _ = apply_calibration(&std, &fit);
            prop_assert_eq!((mmse, std), before);
        }
    }
}
