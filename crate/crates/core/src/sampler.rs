//! Differentiable bilinear sampling.
//!
//! Sampling locations outside `[0, W−1] × [0, H−1]` produce zero with a
//! cleared validity flag; nothing is clamped or reflected. On an interior
//! lattice line the cell to the right (or below) is used, so derivatives there
//! are right-derivatives; on the last column/row the cell to the left is used.

use crate::error::{Error, Result};
use crate::geometry::WarpField;
use crate::grid::{Grid, Image, Mask};

/// Output of [`sample_bilinear`]. Invalid pixels hold zero in every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGrid {
    pub values: Grid,
    pub valid: Mask,
}

impl SampledGrid {
    /// Restricts validity to `mask`, zeroing newly invalid pixels.
    pub fn restrict(&mut self, mask: &Mask) -> Result<()> {
        mask.expect_dims(self.values.height(), self.values.width(), "restrict sampled grid")?;
        for p in 0..self.values.len_pixels() {
            if self.valid.at(p) && !mask.at(p) {
                self.valid.set_at(p, false);
                self.values.pixel_mut(p).fill(0.0);
            }
        }
        Ok(())
    }
}

/// Bilinear cell along one axis: `(i0, i1, frac)` with `x = i0 + frac`.
#[inline]
fn cell(x: f64, n: usize) -> Option<(usize, usize, f64)> {
    if !(x >= 0.0 && x <= (n - 1) as f64) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let i0 = (x.floor() as usize).min(n - 2);
    Some((i0, i0 + 1, x - i0 as f64))
}

struct Footprint {
    idx: [usize; 4],
    fx: f64,
    fy: f64,
}

impl Footprint {
    #[inline]
    fn locate(grid: &Grid, u: f64, v: f64) -> Option<Footprint> {
        let (x0, x1, fx) = cell(u, grid.width())?;
        let (y0, y1, fy) = cell(v, grid.height())?;
        let w = grid.width();
        Some(Footprint {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            fx,
            fy,
        })
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }
}

fn check_coords(coords: &Grid) -> Result<()> {
    if coords.channels() != 2 {
        return Err(Error::shape(format!(
            "coordinate field needs 2 channels, got {}",
            coords.channels()
        )));
    }
    Ok(())
}

/// Samples `grid` at the `(u, v)` locations in `coords` (an `H'×W'×2` field).
pub fn sample_bilinear(grid: &Grid, coords: &Grid) -> Result<SampledGrid> {
    if grid.len_pixels() == 0 || grid.channels() == 0 {
        return Err(Error::shape("cannot sample an empty grid"));
    }
    check_coords(coords)?;
    let (h, w, c) = (coords.height(), coords.width(), grid.channels());
    let mut values = Grid::zeros(h, w, c);
    let mut valid = Mask::filled(h, w, false);
    for p in 0..h * w {
        let uv = coords.pixel(p);
        let Some(fp) = Footprint::locate(grid, uv[0], uv[1]) else {
            continue;
        };
        // Nested form keeps node values bit-exact.
        let (fx, fy) = (fp.fx, fp.fy);
        let out = values.pixel_mut(p);
        for (ch, o) in out.iter_mut().enumerate() {
            let g = |i: usize| grid.pixel(fp.idx[i])[ch];
            let top = (1.0 - fx) * g(0) + fx * g(1);
            let bottom = (1.0 - fx) * g(2) + fx * g(3);
            *o = (1.0 - fy) * top + fy * bottom;
        }
        valid.set_at(p, true);
    }
    Ok(SampledGrid { values, valid })
}

/// Adjoint of [`sample_bilinear`]: given `∂L/∂values` in `upstream`, returns
/// `(∂L/∂grid, ∂L/∂coords)`. Invalid sample locations contribute nothing.
pub fn sample_bilinear_grad(grid: &Grid, coords: &Grid, upstream: &Grid) -> Result<(Grid, Grid)> {
    check_coords(coords)?;
    if !upstream.same_spatial(coords) || upstream.channels() != grid.channels() {
        return Err(Error::shape(format!(
            "upstream {}x{}x{} does not match coords {}x{} with {} channels",
            upstream.height(),
            upstream.width(),
            upstream.channels(),
            coords.height(),
            coords.width(),
            grid.channels()
        )));
    }
    let c = grid.channels();
    let mut grad_grid = Grid::zeros(grid.height(), grid.width(), c);
    let mut grad_coords = Grid::zeros(coords.height(), coords.width(), 2);
    for p in 0..coords.len_pixels() {
        let uv = coords.pixel(p);
        let Some(fp) = Footprint::locate(grid, uv[0], uv[1]) else {
            continue;
        };
        let wts = fp.weights();
        let up = upstream.pixel(p);
        let (fx, fy) = (fp.fx, fp.fy);
        let (mut gu, mut gv) = (0.0, 0.0);
        for (ch, &g) in up.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (k, &wk) in wts.iter().enumerate() {
                grad_grid.pixel_mut(fp.idx[k])[ch] += g * wk;
            }
            let n = |i: usize| grid.pixel(fp.idx[i])[ch];
            if grid.width() > 1 {
                gu += g * ((1.0 - fy) * (n(1) - n(0)) + fy * (n(3) - n(2)));
            }
            if grid.height() > 1 {
                gv += g * ((1.0 - fx) * (n(2) - n(0)) + fx * (n(3) - n(1)));
            }
        }
        grad_coords.pixel_mut(p).copy_from_slice(&[gu, gv]);
    }
    Ok((grad_grid, grad_coords))
}

/// Reconstructs the target view by sampling `source` through `warp`.
pub fn synthesize_view(source: &Image, warp: &WarpField) -> Result<SampledGrid> {
    source.expect_spatial(warp.height(), warp.width(), "source image vs warp field")?;
    let mut out = sample_bilinear(source, &warp.coords)?;
    out.restrict(&warp.valid)?;
    Ok(out)
}
