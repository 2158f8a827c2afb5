//! Inner tiling: predict overlapping tiles, keep each tile's centre, stitch.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::VelocityModel;
use crate::raster::Raster;
use crate::rng::{normal_raster, rng_from_seed};
use crate::sampler::{base_state, euler_from, PosteriorSet, SamplerConfig};
use crate::scalar::Real;

pub const DEFAULT_OVERLAP: f64 = 0.5;

/// One tile: an input window (image coordinates, may extend past the border)
/// and the part of its centre that is written to the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TileWindow {
    pub grid_row: usize,
    pub grid_col: usize,
    pub input_row: isize,
    pub input_col: isize,
    pub inner_row: usize,
    pub inner_col: usize,
    /// Inner extent after cropping to the image.
    pub inner_h: usize,
    pub inner_w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TileGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub tile: usize,
    pub overlap_fraction: f64,
    pub inner: usize,
    pub margin: usize,
    pub rows: usize,
    pub cols: usize,
    pub tiles: Vec<TileWindow>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Height and width of the reflect-padded frame every input window lies in.
    pub fn padded_shape(&self) -> (usize, usize) {
        (self.rows * self.inner + 2 * self.margin, self.cols * self.inner + 2 * self.margin)
    }
}

pub fn plan_tiles(image_h: usize, image_w: usize, tile: usize, overlap_fraction: f64) -> Result<TileGrid> {
    if tile == 0 || !tile.is_multiple_of(2) {
        return Err(Error::validation(format!("tile size must be even and positive, got {tile}")));
    }
    if !(overlap_fraction > 0.0 && overlap_fraction < 1.0) {
        return Err(Error::validation(format!("overlap fraction must lie in (0, 1), got {overlap_fraction}")));
    }
    if image_h == 0 || image_w == 0 {
        return Err(Error::validation("cannot tile an empty image"));
    }
    let inner = (tile as f64 * (1.0 - overlap_fraction)).round() as usize;
    if inner == 0 || !(tile - inner).is_multiple_of(2) {
        return Err(Error::validation(format!(
            "tile {tile} with overlap {overlap_fraction} gives an inner window of {inner} px that cannot be centred"
        )));
    }
    let margin = (tile - inner) / 2;
    let rows = image_h.div_ceil(inner);
    let cols = image_w.div_ceil(inner);
    // reflect padding cannot reach further than one image length
    let pad_h = margin + rows * inner - image_h;
    let pad_w = margin + cols * inner - image_w;
    if pad_h >= image_h.max(2) || pad_w >= image_w.max(2) {
        return Err(Error::validation(format!(
            "tile {tile} is too large for a {image_h}x{image_w} image (needs {pad_h}x{pad_w} px of reflect padding)"
        )));
    }
    let mut tiles = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let (r0, c0) = (gr * inner, gc * inner);
            tiles.push(TileWindow {
                grid_row: gr,
                grid_col: gc,
                input_row: r0 as isize - margin as isize,
                input_col: c0 as isize - margin as isize,
                inner_row: r0,
                inner_col: c0,
                inner_h: inner.min(image_h - r0),
                inner_w: inner.min(image_w - c0),
            });
        }
    }
    Ok(TileGrid {
        image_h,
        image_w,
        tile,
        overlap_fraction,
        inner,
        margin,
        rows,
        cols,
        tiles,
    })
}

fn check_grid<T: Real>(image: &Raster<T>, grid: &TileGrid) -> Result<()> {
    if image.shape() != (grid.image_h, grid.image_w) {
        return Err(Error::ShapeMismatch {
            expected: (grid.image_h, grid.image_w),
            actual: image.shape(),
        });
    }
    Ok(())
}

fn tile_error(w: &TileWindow, e: Error) -> Error {
    Error::Tile {
        row: w.grid_row,
        col: w.grid_col,
        source: Box::new(e),
    }
}

/// Copies the inner region of a `tile x tile` prediction into `out`.
fn stitch<T: Real>(out: &mut Raster<T>, pred: &Raster<T>, w: &TileWindow, grid: &TileGrid) -> Result<()> {
    if pred.shape() != (grid.tile, grid.tile) {
        return Err(tile_error(
            w,
            Error::ShapeMismatch {
                expected: (grid.tile, grid.tile),
                actual: pred.shape(),
            },
        ));
    }
    let inner = pred.crop_reflect(grid.margin as isize, grid.margin as isize, w.inner_h, w.inner_w);
    out.paste(&inner, w.inner_row, w.inner_col);
    Ok(())
}

/// Runs `per_tile` on every reflect-padded input tile and stitches the
/// centres into a raster of the image's shape.
pub fn predict_tiled<T: Real>(
    image: &Raster<T>,
    grid: &TileGrid,
    mut per_tile: impl FnMut(&TileWindow, &Raster<T>) -> Result<Raster<T>>,
) -> Result<Raster<T>> {
    check_grid(image, grid)?;
    let mut out = Raster::zeros(grid.image_h, grid.image_w);
    for w in &grid.tiles {
        let input = image.crop_reflect(w.input_row, w.input_col, grid.tile, grid.tile);
        let pred = per_tile(w, &input).map_err(|e| tile_error(w, e))?;
        stitch(&mut out, &pred, w, grid)?;
    }
    Ok(out)
}

/// Base noise of posterior sample `index` over the whole padded frame.
fn frame_noise<T: Real>(grid: &TileGrid, cfg: &SamplerConfig, index: usize) -> Raster<T> {
    let (ph, pw) = grid.padded_shape();
    normal_raster(ph, pw, &mut rng_from_seed(cfg.sample_seed(index)))
}

/// Posterior sampling over a full frame. Sample `j` of every tile starts from
/// the same frame-wide noise field, cropped to the tile, so the stitched
/// sample is one coherent draw.
pub fn sample_posterior_tiled<T: Real, M: VelocityModel<T> + ?Sized>(
    field: &M,
    cond: &Raster<T>,
    grid: &TileGrid,
    cfg: &SamplerConfig,
    observation_ref: &str,
) -> Result<PosteriorSet<T>> {
    cfg.validate()?;
    check_grid(cond, grid)?;
    let noise: Vec<Raster<T>> = (0..cfg.n_samples).map(|j| frame_noise(grid, cfg, j)).collect();
    let mut frames = vec![Raster::zeros(grid.image_h, grid.image_w); cfg.n_samples];
    let m = grid.margin as isize;
    for w in &grid.tiles {
        let tile_cond = cond.crop_reflect(w.input_row, w.input_col, grid.tile, grid.tile);
        let starts = noise
            .iter()
            .map(|n| {
                let z = n.crop_reflect(w.input_row + m, w.input_col + m, grid.tile, grid.tile);
                base_state(cfg.coupling, z, &tile_cond)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| tile_error(w, e))?;
        let preds = euler_from(field, &tile_cond, starts, cfg.steps_t).map_err(|e| tile_error(w, e))?;
        for (frame, pred) in frames.iter_mut().zip(&preds) {
            stitch(frame, pred, w, grid)?;
        }
    }
    PosteriorSet::from_samples(frames, observation_ref)
}
