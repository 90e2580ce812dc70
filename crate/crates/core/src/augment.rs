//! Occlusion-mask augmentation.
//!
//! A rectangle whose sides are a quarter of the frame's sides is blanked out
//! of the target frame. The depth pseudo-label is the source-frame depth
//! estimate warped onto the target grid; the masked depth loss is then taken
//! over the pixels that are both unoccluded and validly warped.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject, warp_field, CameraIntrinsics, PoseSE3, WarpField, MIN_DEPTH_MM};
use crate::grid::{DepthMap, Grid, Image, Mask};
use crate::sampler::sample_bilinear;

/// Axis-aligned pixel rectangle `[top, top+height) × [left, left+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.height <= height && self.left + self.width <= width
    }

    pub fn to_mask(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |r, c| self.contains(r, c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    /// Set on occluded pixels.
    pub occluded: Mask,
    pub rect: Rect,
    pub seed: u64,
}

/// Places a `⌊H/4⌋ × ⌊W/4⌋` rectangle uniformly over all in-bounds positions.
pub fn make_occlusion_mask(height: usize, width: usize, seed: u64) -> Result<OcclusionMask> {
    if height < 4 || width < 4 {
        return Err(Error::domain(format!(
            "occlusion masks need at least a 4x4 frame, got {height}x{width}"
        )));
    }
    let (mh, mw) = (height / 4, width / 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.gen_range(0..=height - mh);
    let left = rng.gen_range(0..=width - mw);
    let rect = Rect {
        top,
        left,
        height: mh,
        width: mw,
    };
    Ok(OcclusionMask {
        occluded: rect.to_mask(height, width),
        rect,
        seed,
    })
}

/// How the occluded rectangle is filled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    Value(f64),
    /// Mean intensity of the unmasked image.
    Mean,
}

impl Default for MaskFill {
    fn default() -> Self {
        MaskFill::Value(0.0)
    }
}

impl MaskFill {
    pub fn resolve(&self, image: &Image) -> f64 {
        match *self {
            MaskFill::Value(v) => v,
            MaskFill::Mean => image.mean(),
        }
    }
}

/// Copy of `image` with every channel of the occluded rectangle set to `fill`.
pub fn apply_mask(image: &Image, mask: &OcclusionMask, fill: f64) -> Result<Image> {
    mask.occluded.expect_dims(image.height(), image.width(), "apply mask")?;
    let mut out = image.clone();
    for p in 0..image.len_pixels() {
        if mask.occluded.at(p) {
            out.pixel_mut(p).fill(fill);
        }
    }
    Ok(out)
}

/// Warped source depth on the target grid. Carries no gradient path: it is a
/// constant target for the masked depth loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPseudoLabel {
    /// Target-frame depth of the source surface point seen through each
    /// target pixel, mm. Zero where invalid.
    pub depth: DepthMap,
    pub valid: Mask,
}

/// Builds the depth pseudo-label from a source-frame depth estimate.
///
/// `target_depth` drives the warp; `source_depth` is sampled at the warped
/// coordinates, lifted back to 3-D in the source camera and expressed in the
/// target camera, whose `Z` is the label.
pub fn augmented_depth_target(
    target_depth: &DepthMap,
    source_depth: &DepthMap,
    k: &CameraIntrinsics,
    pose_t_to_s: &PoseSE3,
) -> Result<DepthPseudoLabel> {
    let warp = warp_field(target_depth, k, pose_t_to_s)?;
    depth_pseudo_label(&warp, source_depth, pose_t_to_s)
}

/// Same as [`augmented_depth_target`] for a precomputed warp.
pub fn depth_pseudo_label(
    warp: &WarpField,
    source_depth: &DepthMap,
    pose_t_to_s: &PoseSE3,
) -> Result<DepthPseudoLabel> {
    if source_depth.channels() != 1 {
        return Err(Error::shape("source depth must have one channel"));
    }
    source_depth.expect_spatial(warp.height(), warp.width(), "source depth vs warp")?;
    if let Some(bad) = source_depth.data().iter().find(|d| !(**d > 0.0)) {
        return Err(Error::domain(format!("source depth must be positive, found {bad}")));
    }
    let k = warp.intrinsics();
    let sampled = sample_bilinear(source_depth, &warp.coords)?;
    let s_to_t = pose_t_to_s.inverse();
    let (h, w) = (warp.height(), warp.width());
    let mut depth = Grid::zeros(h, w, 1);
    let mut valid = Mask::filled(h, w, false);
    for p in 0..h * w {
        if !(warp.valid.at(p) && sampled.valid.at(p)) {
            continue;
        }
        let uv = warp.coords.pixel(p);
        let z_s = sampled.values.data()[p];
        let in_source = backproject(&Vector2::new(uv[0], uv[1]), z_s, k)?;
        let z_t = s_to_t.transform(&in_source).z;
        if z_t > MIN_DEPTH_MM {
            depth.data_mut()[p] = z_t;
            valid.set_at(p, true);
        }
    }
    Ok(DepthPseudoLabel { depth, valid })
}

/// Support of the masked depth loss: unoccluded and validly warped.
pub fn depth_loss_support(occlusion: &OcclusionMask, valid: &Mask) -> Result<Mask> {
    occlusion.occluded.not().and(valid)
}
