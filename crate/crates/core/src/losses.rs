//! Training objectives with analytic gradients.
//!
//! Every loss returns a [`LossValue`] holding the scalar and a gradient grid
//! for each differentiable input, keyed by the names in [`inputs`]. Masked
//! reductions only ever visit pixels inside the mask, so inputs outside it
//! cannot influence the value, not even through NaN propagation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Grid, Image, Mask};
use crate::nmf::SegmentationMap;
use crate::sampler::SampledGrid;

/// Lower clamp inside the logarithms of the semantic-consistency loss.
pub const LOG_EPS: f64 = 1e-7;

/// Names under which gradients are reported.
pub mod inputs {
    /// Reconstructed (warped) image of the photometric loss.
    pub const RECON: &str = "recon";
    /// Target-frame depth of the masked depth loss.
    pub const DEPTH_TARGET: &str = "depth_target";
    /// Warped source depth of the masked depth loss.
    pub const DEPTH_SOURCE: &str = "depth_source";
    /// Depth map regularised by the smoothness loss.
    pub const DEPTH: &str = "depth";
    pub const SEG_PREV: &str = "seg_prev";
    pub const SEG_NEXT: &str = "seg_next";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Photometric,
    Depth,
    Smoothness,
    Semantic,
    Total,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub term: LossTerm,
    pub value: f64,
    pub grads: BTreeMap<String, Grid>,
}

impl LossValue {
    pub fn grad(&self, name: &str) -> Option<&Grid> {
        self.grads.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub photo: f64,
    pub smooth: f64,
    pub depth: f64,
    pub ss: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photo: 1.0,
            smooth: 1e-3,
            depth: 1.0,
            ss: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("photo", self.photo),
            ("smooth", self.smooth),
            ("depth", self.depth),
            ("ss", self.ss),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::domain(format!(
                    "loss weight {name} must be non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Photometric => self.photo,
            LossTerm::Depth => self.depth,
            LossTerm::Smoothness => self.smooth,
            LossTerm::Semantic => self.ss,
            LossTerm::Total => 1.0,
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference between the target image and a reconstruction,
/// over valid pixels and all channels.
pub fn photometric_loss(target: &Image, recon: &SampledGrid) -> Result<LossValue> {
    target.expect_shape(&recon.values, "photometric loss")?;
    let c = target.channels();
    let n = recon.valid.count() * c;
    if n == 0 {
        return Err(Error::EmptySupport("photometric loss has no valid pixels"));
    }
    let inv = 1.0 / n as f64;
    let mut grad = Grid::zeros(target.height(), target.width(), c);
    let mut sum = 0.0;
    for p in 0..target.len_pixels() {
        if !recon.valid.at(p) {
            continue;
        }
        let g = grad.pixel_mut(p);
        for ((gi, &t), &r) in g.iter_mut().zip(target.pixel(p)).zip(recon.values.pixel(p)) {
            sum += (t - r).abs();
            *gi = sign(r - t) * inv;
        }
    }
    Ok(LossValue {
        term: LossTerm::Photometric,
        value: sum * inv,
        grads: BTreeMap::from([(inputs::RECON.to_owned(), grad)]),
    })
}

/// Masked L1 between the target depth and the warped source depth,
/// normalised by the number of unmasked pixels.
///
/// Gradients are reported for both depth maps; callers that treat the warped
/// source depth as a pseudo-label simply ignore [`inputs::DEPTH_SOURCE`].
pub fn depth_loss(depth_target: &DepthMap, depth_source: &DepthMap, mask: &Mask) -> Result<LossValue> {
    depth_target.expect_shape(depth_source, "depth loss")?;
    if depth_target.channels() != 1 {
        return Err(Error::shape("depth maps must have one channel"));
    }
    mask.expect_dims(depth_target.height(), depth_target.width(), "depth loss")?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptySupport("depth loss mask is all zero"));
    }
    let inv = 1.0 / n as f64;
    let (h, w) = (depth_target.height(), depth_target.width());
    let mut g_t = Grid::zeros(h, w, 1);
    let mut g_s = Grid::zeros(h, w, 1);
    let mut sum = 0.0;
    for p in (0..h * w).filter(|&p| mask.at(p)) {
        let diff = depth_target.data()[p] - depth_source.data()[p];
        sum += diff.abs();
        let s = sign(diff) * inv;
        g_t.data_mut()[p] = s;
        g_s.data_mut()[p] = -s;
    }
    Ok(LossValue {
        term: LossTerm::Depth,
        value: sum * inv,
        grads: BTreeMap::from([
            (inputs::DEPTH_TARGET.to_owned(), g_t),
            (inputs::DEPTH_SOURCE.to_owned(), g_s),
        ]),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessMode {
    /// Penalise raw depth differences (mm).
    #[default]
    Raw,
    /// Divide depth by its mean first, making the penalty scale-free.
    MeanNormalized,
}

/// Edge-aware smoothness: mean over pixels of
/// `|∂ₓD|·exp(−|∂ₓĪ|) + |∂ᵧD|·exp(−|∂ᵧĪ|)` with forward differences and `Ī`
/// the channel-mean image.
pub fn smoothness_loss(depth: &DepthMap, image: &Image, mode: SmoothnessMode) -> Result<LossValue> {
    if depth.channels() != 1 {
        return Err(Error::shape("depth map must have one channel"));
    }
    image.expect_spatial(depth.height(), depth.width(), "smoothness loss")?;
    let (h, w) = (depth.height(), depth.width());
    let gray = image.channel_mean();
    let norm = match mode {
        SmoothnessMode::Raw => 1.0,
        SmoothnessMode::MeanNormalized => {
            let mu = depth.mean();
            if !(mu > 0.0) {
                return Err(Error::domain("mean-normalised smoothness needs a positive mean depth"));
            }
            1.0 / mu
        }
    };
    let d = depth.data();
    let i = gray.data();
    let inv_n = 1.0 / (h * w) as f64;
    // Gradient with respect to the (possibly normalised) depth.
    let mut g = Grid::zeros(h, w, 1);
    let mut sum = 0.0;
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if c + 1 < w {
                let q = p + 1;
                let weight = (-(i[q] - i[p]).abs()).exp();
                let diff = (d[q] - d[p]) * norm;
                sum += diff.abs() * weight;
                let s = sign(diff) * weight * inv_n;
                g.data_mut()[q] += s;
                g.data_mut()[p] -= s;
            }
            if r + 1 < h {
                let q = p + w;
                let weight = (-(i[q] - i[p]).abs()).exp();
                let diff = (d[q] - d[p]) * norm;
                sum += diff.abs() * weight;
                let s = sign(diff) * weight * inv_n;
                g.data_mut()[q] += s;
                g.data_mut()[p] -= s;
            }
        }
    }
    if mode == SmoothnessMode::MeanNormalized {
        // ∂L/∂D_k = (g_k − mean_j(g_j·D_j/μ)) / μ
        let coupling: f64 = g.data().iter().zip(d).map(|(gj, dj)| gj * dj * norm).sum::<f64>() * inv_n;
        for gk in g.data_mut() {
            *gk = (*gk - coupling) * norm;
        }
    }
    Ok(LossValue {
        term: LossTerm::Smoothness,
        value: sum * inv_n,
        grads: BTreeMap::from([(inputs::DEPTH.to_owned(), g)]),
    })
}

/// Validity masks for the two cross-entropy terms of the semantic loss.
#[derive(Debug, Clone, Copy)]
pub enum SemanticMasks<'a> {
    /// One mask shared by both terms and one normaliser.
    Shared(&'a Mask),
    /// Each source view carries its own mask and is normalised by its own count.
    PerSource { prev: &'a Mask, next: &'a Mask },
}

/// Pixel-wise cross-entropy between the one-hot arg-max of the target
/// segmentation and the two warped source segmentations.
pub fn semantic_consistency_loss(
    target: &SegmentationMap,
    warped_prev: &Grid,
    warped_next: &Grid,
    masks: SemanticMasks<'_>,
) -> Result<LossValue> {
    let s0 = target.probs();
    s0.expect_shape(warped_prev, "semantic loss (prev)")?;
    s0.expect_shape(warped_next, "semantic loss (next)")?;
    let (h, w, k) = (s0.height(), s0.width(), s0.channels());
    let (m_prev, m_next) = match masks {
        SemanticMasks::Shared(m) => (m, m),
        SemanticMasks::PerSource { prev, next } => (prev, next),
    };
    m_prev.expect_dims(h, w, "semantic loss mask")?;
    m_next.expect_dims(h, w, "semantic loss mask")?;
    let labels = target.argmax_labels();

    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for (warped, mask, name) in [
        (warped_prev, m_prev, inputs::SEG_PREV),
        (warped_next, m_next, inputs::SEG_NEXT),
    ] {
        let n = mask.count();
        if n == 0 {
            return Err(Error::EmptySupport("semantic loss mask is all zero"));
        }
        let inv = 1.0 / n as f64;
        let mut g = Grid::zeros(h, w, k);
        let mut sum = 0.0;
        for p in (0..h * w).filter(|&p| mask.at(p)) {
            let cls = labels[p];
            let s = warped.pixel(p)[cls];
            if s > LOG_EPS {
                sum += s.ln();
                g.pixel_mut(p)[cls] = -inv / s;
            } else {
                sum += LOG_EPS.ln();
            }
        }
        value -= sum * inv;
        grads.insert(name.to_owned(), g);
    }
    Ok(LossValue {
        term: LossTerm::Semantic,
        value,
        grads,
    })
}

/// Weighted sum of loss components; gradients with the same name accumulate.
pub fn total_loss(weights: &LossWeights, components: &[LossValue]) -> Result<LossValue> {
    weights.validate()?;
    let mut value = 0.0;
    let mut grads: BTreeMap<String, Grid> = BTreeMap::new();
    for comp in components {
        let wgt = weights.weight(comp.term);
        value += wgt * comp.value;
        for (name, g) in &comp.grads {
            match grads.get_mut(name) {
                Some(acc) => acc.add_scaled(g, wgt)?,
                None => {
                    grads.insert(name.clone(), g.map(|v| v * wgt));
                }
            }
        }
    }
    Ok(LossValue {
        term: LossTerm::Total,
        value,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_valid(values: Grid) -> SampledGrid {
        let valid = Mask::filled(values.height(), values.width(), true);
        SampledGrid { values, valid }
    }

    #[test]
    fn photometric_examples() {
        let it = Grid::filled(4, 4, 3, 1.0);
        assert_eq!(photometric_loss(&it, &all_valid(it.clone())).unwrap().value, 0.0);
        let l = photometric_loss(&it, &all_valid(Grid::filled(4, 4, 3, 0.5))).unwrap();
        assert_eq!(l.value, 0.5);
        let g = l.grad(inputs::RECON).unwrap();
        assert!(g.data().iter().all(|&v| v == -1.0 / 48.0));
    }

    #[test]
    fn photometric_ignores_invalid_and_rejects_empty() {
        let it = Grid::filled(2, 2, 1, 1.0);
        let mut recon = all_valid(Grid::filled(2, 2, 1, 0.0));
        recon.valid.set(0, 0, false);
        let l = photometric_loss(&it, &recon).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad(inputs::RECON).unwrap().get(0, 0, 0), 0.0);
        recon.valid = Mask::filled(2, 2, false);
        assert!(matches!(photometric_loss(&it, &recon), Err(Error::EmptySupport(_))));
    }

    #[test]
    fn depth_loss_examples() {
        let a = Grid::from_fn(4, 4, 1, |r, c, _| 10.0 + (r * 4 + c) as f64);
        let half = Mask::from_fn(4, 4, |r, _| r < 2);
        assert_eq!(depth_loss(&a, &a, &half).unwrap().value, 0.0);
        let b = a.map(|v| v + 2.0);
        let l = depth_loss(&a, &b, &half).unwrap();
        assert_eq!(l.value, 2.0);
        let g = l.grad(inputs::DEPTH_TARGET).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expected = if r < 2 { -1.0 / 8.0 } else { 0.0 };
                assert_eq!(g.get(r, c, 0), expected);
            }
        }
        let mut perturbed = a.clone();
        perturbed.set(3, 1, 0, f64::NAN);
        perturbed.set(2, 0, 0, 1e9);
        assert_eq!(
            depth_loss(&perturbed, &b, &half).unwrap().value.to_bits(),
            l.value.to_bits()
        );
        assert!(matches!(
            depth_loss(&a, &b, &Mask::filled(4, 4, false)),
            Err(Error::EmptySupport(_))
        ));
    }

    #[test]
    fn smoothness_examples() {
        let img = Grid::filled(5, 8, 3, 0.4);
        assert_eq!(
            smoothness_loss(&Grid::filled(5, 8, 1, 3.0), &img, SmoothnessMode::Raw)
                .unwrap()
                .value,
            0.0
        );
        let ramp = Grid::from_fn(5, 8, 1, |_, c, _| 10.0 + c as f64);
        let flat = smoothness_loss(&ramp, &img, SmoothnessMode::Raw).unwrap().value;
        assert!((flat - 7.0 / 8.0).abs() < 1e-15);
        let edged = Grid::from_fn(5, 8, 3, |_, c, _| if c < 4 { 0.0 } else { 1.0 });
        let edge = smoothness_loss(&ramp, &edged, SmoothnessMode::Raw).unwrap().value;
        assert!(edge < flat);
        assert!(smoothness_loss(&ramp, &Grid::filled(5, 7, 3, 0.0), SmoothnessMode::Raw).is_err());
    }

    #[test]
    fn normalised_smoothness_is_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Grid::from_fn(6, 6, 1, |_, _, _| rng.gen_range(10.0..20.0));
        let img = Grid::from_fn(6, 6, 1, |_, _, _| rng.gen_range(0.0..1.0));
        let a = smoothness_loss(&d, &img, SmoothnessMode::MeanNormalized).unwrap().value;
        let b = smoothness_loss(&d.map(|v| 3.0 * v), &img, SmoothnessMode::MeanNormalized)
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-14);
    }

    fn seg(probs: Grid) -> SegmentationMap {
        SegmentationMap::new(probs).unwrap()
    }

    #[test]
    fn semantic_examples() {
        let onehot = Grid::from_fn(3, 3, 4, |r, c, ch| if (r + c) % 4 == ch { 1.0 } else { 0.0 });
        let m = Mask::filled(3, 3, true);
        let s0 = seg(onehot.clone());
        let l = semantic_consistency_loss(&s0, &onehot, &onehot, SemanticMasks::Shared(&m)).unwrap();
        assert_eq!(l.value, 0.0);
        let uniform = Grid::filled(3, 3, 4, 0.25);
        let l = semantic_consistency_loss(&s0, &uniform, &uniform, SemanticMasks::Shared(&m)).unwrap();
        assert!((l.value - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 2.7726).abs() < 1e-4);
        let per = semantic_consistency_loss(&s0, &uniform, &uniform, SemanticMasks::PerSource { prev: &m, next: &m })
            .unwrap();
        assert_eq!(per.value, l.value);
    }

    #[test]
    fn semantic_mask_annihilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s0 = seg(Grid::filled(4, 4, 3, 1.0 / 3.0));
        let prev = Grid::from_fn(4, 4, 3, |_, _, _| rng.gen_range(0.05..1.0));
        let next = Grid::from_fn(4, 4, 3, |_, _, _| rng.gen_range(0.05..1.0));
        let m = Mask::from_fn(4, 4, |r, c| (r + c) % 3 != 0);
        let base = semantic_consistency_loss(&s0, &prev, &next, SemanticMasks::Shared(&m)).unwrap();
        let mut p2 = prev.clone();
        let mut n2 = next.clone();
        for r in 0..4 {
            for c in 0..4 {
                if !m.get(r, c) {
                    p2.set(r, c, 0, 0.0);
                    n2.set(r, c, 1, f64::NAN);
                }
            }
        }
        let after = semantic_consistency_loss(&s0, &p2, &n2, SemanticMasks::Shared(&m)).unwrap();
        assert_eq!(after.value.to_bits(), base.value.to_bits());
        assert!(matches!(
            semantic_consistency_loss(&s0, &prev, &next, SemanticMasks::Shared(&Mask::filled(4, 4, false))),
            Err(Error::EmptySupport(_))
        ));
    }

    #[test]
    fn semantic_clamps_zero_probabilities() {
        let s0 = seg(Grid::from_fn(1, 1, 2, |_, _, ch| if ch == 0 { 1.0 } else { 0.0 }));
        let zero = Grid::from_fn(1, 1, 2, |_, _, ch| ch as f64);
        let m = Mask::filled(1, 1, true);
        let l = semantic_consistency_loss(&s0, &zero, &zero, SemanticMasks::Shared(&m)).unwrap();
        assert!((l.value + 2.0 * LOG_EPS.ln()).abs() < 1e-12);
        assert!(l.grad(inputs::SEG_PREV).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let photo = LossValue {
            term: LossTerm::Photometric,
            value: 0.5,
            grads: BTreeMap::from([("x".to_owned(), Grid::filled(1, 2, 1, 1.0))]),
        };
        let depth = LossValue {
            term: LossTerm::Depth,
            value: 0.25,
            grads: BTreeMap::from([("x".to_owned(), Grid::filled(1, 2, 1, 0.5))]),
        };
        let zero = LossWeights {
            photo: 0.0,
            smooth: 0.0,
            depth: 0.0,
            ss: 0.0,
        };
        assert_eq!(total_loss(&zero, &[photo.clone(), depth.clone()]).unwrap().value, 0.0);
        let unit = LossWeights { photo: 1.0, ..zero };
        let single = total_loss(&unit, std::slice::from_ref(&photo)).unwrap();
        assert_eq!((single.value, &single.grads), (photo.value, &photo.grads));
        let w = LossWeights {
            photo: 2.0,
            depth: 4.0,
            ..zero
        };
        let t = total_loss(&w, &[photo, depth]).unwrap();
        assert_eq!(t.value, 2.0);
        assert_eq!(t.grads["x"].data(), &[4.0, 4.0]);
        assert!(total_loss(&LossWeights { photo: -1.0, ..zero }, &[]).is_err());
    }

    proptest! {
        #[test]
        fn depth_loss_is_symmetric_and_non_negative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Grid::from_fn(5, 5, 1, |_, _, _| rng.gen_range(1.0..100.0));
            let b = Grid::from_fn(5, 5, 1, |_, _, _| rng.gen_range(1.0..100.0));
            let mut m = Mask::from_fn(5, 5, |_, _| rng.gen_bool(0.5));
            m.set(0, 0, true);
            let ab = depth_loss(&a, &b, &m).unwrap().value;
            let ba = depth_loss(&b, &a, &m).unwrap().value;
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0 && ab.is_finite());
        }

        #[test]
        fn semantic_zero_iff_confident(seed in 0u64..500, conf in 0.5f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..9).map(|_| rng.gen_range(0..3)).collect();
            let s0 = seg(Grid::from_fn(3, 3, 3, |r, c, ch| if labels[r * 3 + c] == ch { 0.8 } else { 0.1 }));
            let warped = Grid::from_fn(3, 3, 3, |r, c, ch| if labels[r * 3 + c] == ch { conf } else { (1.0 - conf) / 2.0 });
            let m = Mask::filled(3, 3, true);
            let l = semantic_consistency_loss(&s0, &warped, &warped, SemanticMasks::Shared(&m)).unwrap().value;
            prop_assert!(l >= 0.0);
            if conf < 1.0 - LOG_EPS { prop_assert!(l > 0.0); }
        }
    }
}
