//! Synthetic fluorescence-like ground-truth signals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::rng_from_seed;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    /// Nucleus-like discs that never touch each other.
    Blobs,
    /// Thin curved fibres, allowed to cross.
    Filaments,
    /// Half blobs, half filaments.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub width: usize,
    pub height: usize,
    pub structure_kind: StructureKind,
    /// Inclusive `[min, max]` number of objects.
    pub object_count_range: [usize; 2],
    /// Inclusive photon-count range of object intensities.
    pub intensity_range: [f64; 2],
    pub seed: u64,
}

pub const MIN_SIGNAL_SIDE: usize = 32;

impl SignalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_SIGNAL_SIDE || self.height < MIN_SIGNAL_SIDE {
            return Err(Error::validation(format!(
                "signal must be at least {MIN_SIGNAL_SIDE}x{MIN_SIGNAL_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        let [lo, hi] = self.object_count_range;
        if lo > hi {
            return Err(Error::validation(format!("empty object_count_range [{lo}, {hi}]")));
        }
        let [ilo, ihi] = self.intensity_range;
        if !(ilo > 0.0 && ihi >= ilo && ihi.is_finite()) {
            return Err(Error::validation(format!(
                "intensity_range must be strictly positive and ordered, got [{ilo}, {ihi}]"
            )));
        }
        Ok(())
    }

    /// Same spec with the seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        SignalSpec { seed, ..self.clone() }
    }
}

struct Disc {
    row: isize,
    col: isize,
    radius: isize,
}

fn blob_radius_range(spec: &SignalSpec) -> (isize, isize) {
    let side = spec.width.min(spec.height) as isize;
    (2, (side / 12).max(3))
}

fn place_blobs<R: Rng>(spec: &SignalSpec, count: usize, rng: &mut R) -> Result<Vec<Disc>> {
    let (rmin, rmax) = blob_radius_range(spec);
    let (h, w) = (spec.height as isize, spec.width as isize);
    let mut discs: Vec<Disc> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while discs.len() < count {
        attempts += 1;
        if attempts > 2000 * count.max(1) {
            return Err(Error::validation(format!(
                "could not place {count} separated blobs in a {h}x{w} field"
            )));
        }
        let radius = rng.random_range(rmin as i64..=rmax as i64) as isize;
        let row = rng.random_range((radius + 1) as i64..(h - radius - 1) as i64) as isize;
        let col = rng.random_range((radius + 1) as i64..(w - radius - 1) as i64) as isize;
        // a gap of more than two pixels keeps discs apart under 8-connectivity
        let clear = discs.iter().all(|d| {
            let (dr, dc) = ((d.row - row) as f64, (d.col - col) as f64);
            (dr * dr + dc * dc).sqrt() > (d.radius + radius + 2) as f64
        });
        if clear {
            discs.push(Disc { row, col, radius });
        }
    }
    Ok(discs)
}

fn draw_blob<T: Real, R: Rng>(out: &mut Raster<T>, disc: &Disc, lo: f64, hi: f64, rng: &mut R) {
    let peak = rng.random_range(lo..=hi);
    let r2 = (disc.radius * disc.radius) as f64;
    for dr in -disc.radius..=disc.radius {
        for dc in -disc.radius..=disc.radius {
            let d2 = (dr * dr + dc * dc) as f64;
            if d2 > r2 {
                continue;
            }
            // soft dome between `lo` and `peak`
            let profile = (1.0 - d2 / (r2 + 1.0)).sqrt();
            let v = lo + (peak - lo) * profile;
            out.set((disc.row + dr) as usize, (disc.col + dc) as usize, T::of(v));
        }
    }
}

fn draw_filament<T: Real, R: Rng>(out: &mut Raster<T>, lo: f64, hi: f64, rng: &mut R) {
    let (h, w) = (out.height() as f64, out.width() as f64);
    let value = rng.random_range(lo..=hi);
    let mut y = rng.random_range(0.0..h);
    let mut x = rng.random_range(0.0..w);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let length = rng.random_range(h.min(w) * 0.3..h.min(w) * 0.8);
    let step = 0.5;
    let mut travelled = 0.0;
    while travelled < length {
        let (r, c) = (y.round() as isize, x.round() as isize);
        if r >= 0 && c >= 0 && (r as f64) < h && (c as f64) < w {
            let (r, c) = (r as usize, c as usize);
            let v = out.get(r, c).f64().max(value);
            out.set(r, c, T::of(v));
        }
        heading += rng.random_range(-0.08..0.08);
        y += step * heading.sin();
        x += step * heading.cos();
        travelled += step;
    }
}

/// Draws a ground-truth signal. Background is exactly zero; every object
/// pixel lies inside `intensity_range`.
pub fn gen_signal<T: Real>(spec: &SignalSpec) -> Result<Raster<T>> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let [cmin, cmax] = spec.object_count_range;
    let count = rng.random_range(cmin..=cmax);
    let [lo, hi] = spec.intensity_range;
    let mut out = Raster::zeros(spec.height, spec.width);

    let (n_blobs, n_fils) = match spec.structure_kind {
        StructureKind::Blobs => (count, 0),
        StructureKind::Filaments => (0, count),
        StructureKind::Mixed => (count.div_ceil(2), count / 2),
    };
    for disc in place_blobs(spec, n_blobs, &mut rng)? {
        draw_blob(&mut out, &disc, lo, hi, &mut rng);
    }
    for _ in 0..n_fils {
        draw_filament(&mut out, lo, hi, &mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: StructureKind, count: [usize; 2], seed: u64) -> SignalSpec {
        SignalSpec {
            width: 64,
            height: 64,
            structure_kind: kind,
            object_count_range: count,
            intensity_range: [50.0, 200.0],
            seed,
        }
    }

    /// Independent 8-connected component counter.
    fn count_components(r: &Raster<f64>) -> usize {
        let (h, w) = r.shape();
        let mut seen = vec![false; h * w];
        let mut n = 0;
        for start in 0..h * w {
            if seen[start] || r.as_slice()[start] == 0.0 {
                continue;
            }
            n += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (pr, pc) = ((p / w) as isize, (p % w) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (pr + dr, pc + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let q = nr as usize * w + nc as usize;
                        if !seen[q] && r.as_slice()[q] != 0.0 {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn zero_objects_gives_background() {
        let r: Raster<f32> = gen_signal(&spec(StructureKind::Mixed, [0, 0], 3)).unwrap();
        assert!(r.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let s = spec(StructureKind::Mixed, [3, 8], 11);
        let a: Raster<f32> = gen_signal(&s).unwrap();
        let b: Raster<f32> = gen_signal(&s).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c: Raster<f32> = gen_signal(&s.with_seed(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn five_blobs_make_five_components() {
        let r: Raster<f64> = gen_signal(&spec(StructureKind::Blobs, [5, 5], 7)).unwrap();
        assert_eq!(count_components(&r), 5);
        for seed in 0..20 {
            let r: Raster<f64> = gen_signal(&spec(StructureKind::Blobs, [5, 5], seed)).unwrap();
            assert_eq!(count_components(&r), 5, "seed {seed}");
        }
    }

    #[test]
    fn intensities_stay_in_range() {
        for kind in [StructureKind::Blobs, StructureKind::Filaments, StructureKind::Mixed] {
            let r: Raster<f64> = gen_signal(&spec(kind, [4, 10], 5)).unwrap();
            assert!(r.as_slice().iter().any(|&v| v > 0.0));
            for &v in r.as_slice() {
                assert!(v == 0.0 || (50.0..=200.0).contains(&v), "{v}");
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(StructureKind::Blobs, [1, 2], 0);
        s.width = 16;
        assert!(gen_signal::<f32>(&s).is_err());
        let s = spec(StructureKind::Blobs, [3, 2], 0);
        assert!(gen_signal::<f32>(&s).is_err());
        let mut s = spec(StructureKind::Blobs, [1, 2], 0);
        s.intensity_range = [0.0, 10.0];
        assert!(gen_signal::<f32>(&s).is_err());
    }
}
