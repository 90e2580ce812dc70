//! Desk-scale training loop.
//!
//! A [`ToyModel`] holds one unconstrained parameter per pixel, mapped to
//! depth through a scaled sigmoid, plus one relative pose per source view.
//! The target view is reconstructed from two source views placed at
//! `±baseline` along the camera x-axis, and plain gradient descent with a
//! fixed step minimises
//!
//! ```text
//! photo + smooth·L_smooth [+ depth·L_depth] [+ ss·L_semantic]
//! ```
//!
//! The optional depth term compares the target depth with a pseudo-label
//! built from a second toy model of the first source view's depth, on the
//! pixels left visible by a fresh occlusion mask each step. The optional
//! semantic term compares the target's NMF segmentation with both source
//! segmentations warped into the target frame.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::augment::{depth_loss_support, depth_pseudo_label, make_occlusion_mask, Rect};
use crate::error::{Error, Result};
use crate::geometry::{warp_field, CameraIntrinsics, PoseSE3, WarpField};
use crate::grid::{DepthMap, Grid, Image};
use crate::io;
use crate::losses::{
    depth_loss, inputs, photometric_loss, semantic_consistency_loss, smoothness_loss, LossWeights, SemanticMasks,
    SmoothnessMode,
};
use crate::metrics::{compute_metrics, compute_metrics_in, EvalOptions, MetricsRecord};
use crate::nmf::{build_segmentations, extract_features, nmf_factorize, FilterBank, NmfOptions, SegmentationMap};
use crate::sampler::{sample_bilinear, sample_bilinear_grad, synthesize_view};
use crate::synth::{make_pair, Scene, SceneSpec};

/// Depth assigned inside a fixed rectangle before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptInit {
    /// Seed of the occlusion mask whose rectangle is corrupted.
    pub seed: u64,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub width: usize,
    pub height: usize,
    /// Source cameras sit at `±baseline_mm` along the target camera's x-axis.
    pub baseline_mm: f64,
    pub weights: LossWeights,
    pub nmf_k: usize,
    pub mask_seed: u64,
    /// Adds the masked depth pseudo-label term.
    pub augmentation: bool,
    /// Adds the semantic-consistency term.
    pub segmentation: bool,
    pub learning_rate: f64,
    pub pose_learning_rate: f64,
    pub steps: usize,
    pub output_dir: Option<PathBuf>,
    pub d_min: f64,
    pub d_max: f64,
    /// Initial depth everywhere; the middle of `(d_min, d_max)` when absent.
    pub init_depth: Option<f64>,
    pub learn_pose: bool,
    pub smoothness: SmoothnessMode,
    pub temperature: f64,
    pub corrupt_init: Option<CorruptInit>,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::desk_plane(0),
            width: 64,
            height: 64,
            baseline_mm: 5.0,
            // The depth term is an L1 in mm; at unit weight its fixed-size
            // steps swamp the photometric signal.
            weights: LossWeights {
                depth: 1e-2,
                ..LossWeights::default()
            },
            nmf_k: 4,
            mask_seed: 0,
            augmentation: false,
            segmentation: false,
            learning_rate: 70.0,
            pose_learning_rate: 1e-4,
            steps: 2000,
            output_dir: None,
            d_min: 1.0,
            d_max: 150.0,
            init_depth: None,
            learn_pose: false,
            smoothness: SmoothnessMode::Raw,
            temperature: 1.0,
            corrupt_init: None,
            // Poses are metric, so no median scaling.
            eval: EvalOptions {
                median_scale: false,
                ..EvalOptions::default()
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::domain(msg));
        if self.steps < 1 {
            return bad("step count must be at least 1".into());
        }
        // Zero is allowed: it leaves the parameters untouched.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            ));
        }
        if !(self.pose_learning_rate >= 0.0 && self.pose_learning_rate.is_finite()) {
            return bad(format!(
                "pose learning rate must be finite and non-negative, got {}",
                self.pose_learning_rate
            ));
        }
        if self.nmf_k < 1 {
            return bad("NMF factor K must be at least 1".into());
        }
        if self.width < 4 || self.height < 4 {
            return bad(format!(
                "image must be at least 4x4, got {}x{}",
                self.width, self.height
            ));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return bad(format!(
                "depth range ({}, {}) is not a positive interval",
                self.d_min, self.d_max
            ));
        }
        if !(self.baseline_mm.is_finite() && self.baseline_mm > 0.0) {
            return bad(format!("baseline must be positive, got {}", self.baseline_mm));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for d in self
            .init_depth
            .iter()
            .chain(self.corrupt_init.as_ref().map(|c| &c.depth))
        {
            if !(*d > self.d_min && *d < self.d_max) {
                return bad(format!("initial depth {d} outside ({}, {})", self.d_min, self.d_max));
            }
        }
        self.weights.validate()
    }

    /// Rectangle corrupted at initialisation, if any.
    pub fn corrupt_rect(&self) -> Result<Option<Rect>> {
        self.corrupt_init
            .map(|c| make_occlusion_mask(self.height, self.width, c.seed).map(|m| m.rect))
            .transpose()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel depth parameters and per-source relative poses.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub params: Grid,
    pub d_min: f64,
    pub d_max: f64,
    /// Target-to-source pose for each source view.
    pub poses: Vec<PoseSE3>,
}

impl ToyModel {
    /// Model whose realised depth equals `depth` (every value must lie
    /// strictly inside `(d_min, d_max)`).
    pub fn from_depth(depth: &DepthMap, d_min: f64, d_max: f64, poses: Vec<PoseSE3>) -> Result<Self> {
        if depth.channels() != 1 {
            return Err(Error::shape("depth map must have one channel"));
        }
        let range = d_max - d_min;
        let mut params = Grid::zeros(depth.height(), depth.width(), 1);
        for (t, &d) in params.data_mut().iter_mut().zip(depth.data()) {
            if !(d > d_min && d < d_max) {
                return Err(Error::domain(format!("depth {d} outside ({d_min}, {d_max})")));
            }
            let s = (d - d_min) / range;
            *t = (s / (1.0 - s)).ln();
        }
        Ok(Self {
            params,
            d_min,
            d_max,
            poses,
        })
    }

    pub fn depth(&self) -> DepthMap {
        let range = self.d_max - self.d_min;
        self.params.map(|t| self.d_min + range * sigmoid(t))
    }

    /// `∂depth/∂param` per pixel.
    pub fn depth_slope(&self) -> Grid {
        let range = self.d_max - self.d_min;
        self.params.map(|t| {
            let s = sigmoid(t);
            range * s * (1.0 - s)
        })
    }

    /// Each pose as `[ω; t]` with `ω` the axis-angle vector.
    pub fn pose_params(&self) -> Vec<[f64; 6]> {
        self.poses
            .iter()
            .map(|p| {
                let (w, t) = (p.axis_angle(), p.translation());
                [w.x, w.y, w.z, t.x, t.y, t.z]
            })
            .collect()
    }
}

/// Rendered views and fixed pseudo-labels shared by every step.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub k: CameraIntrinsics,
    pub target: Image,
    pub target_depth: DepthMap,
    /// Source images, first at `+baseline`, second at `−baseline`.
    pub sources: Vec<Image>,
    pub source_depths: Vec<DepthMap>,
    /// Ground-truth target-to-source poses.
    pub poses: Vec<PoseSE3>,
    /// Segmentations of the target followed by each source.
    pub segmentations: Option<Vec<SegmentationMap>>,
}

impl TrainingData {
    pub fn render(config: &RunConfig) -> Result<Self> {
        let scene = Scene::from_spec(&config.scene)?;
        let k = CameraIntrinsics::centered(config.width, config.height)?;
        let pose_t = PoseSE3::identity();
        let mut sources = Vec::new();
        let mut source_depths = Vec::new();
        let mut poses = Vec::new();
        let mut target = None;
        for sign in [1.0, -1.0] {
            // World-to-camera pose of a camera centred at (sign·b, 0, 0).
            let pose_s = PoseSE3::from_translation(Vector3::new(-sign * config.baseline_mm, 0.0, 0.0));
            let pair = make_pair(&scene, &k, &pose_t, &pose_s)?;
            sources.push(pair.source);
            source_depths.push(pair.source_depth);
            poses.push(pair.pose_t_to_s);
            target = Some((pair.target, pair.target_depth));
        }
        let (target, target_depth) = target.expect("two sources rendered");
        let segmentations = if config.segmentation {
            let mut views = vec![target.clone()];
            views.extend(sources.iter().cloned());
            let features = extract_features(&views, &FilterBank::default_with_seed(config.mask_seed))?;
            let nmf = nmf_factorize(
                features.matrix(),
                &NmfOptions {
                    k: config.nmf_k,
                    seed: config.mask_seed,
                    ..NmfOptions::default()
                },
            )?;
            Some(build_segmentations(
                &nmf.p,
                views.len(),
                config.height,
                config.width,
                config.temperature,
            )?)
        } else {
            None
        };
        Ok(Self {
            k,
            target,
            target_depth,
            sources,
            source_depths,
            poses,
            segmentations,
        })
    }
}

/// Loss value and gradients of one evaluation of the training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub depth: Option<f64>,
    pub semantic: Option<f64>,
    /// Gradient with respect to the target model's parameters.
    pub grad_params: Grid,
    /// Gradient with respect to the source-depth model's parameters.
    pub grad_source_params: Option<Grid>,
    /// Gradient with respect to a left twist `(ω, τ)` of each pose.
    pub grad_poses: Vec<[f64; 6]>,
}

/// Pushes a coordinate-field gradient back onto depth and pose.
fn chain_coords(warp: &WarpField, g_coords: &Grid, g_depth: &mut [f64], g_pose: &mut [f64; 6]) {
    for p in 0..warp.height() * warp.width() {
        if !warp.valid.at(p) {
            continue;
        }
        let [gu, gv] = [g_coords.pixel(p)[0], g_coords.pixel(p)[1]];
        if gu == 0.0 && gv == 0.0 {
            continue;
        }
        let dc = warp.d_coords.pixel(p);
        g_depth[p] += gu * dc[0] + gv * dc[1];
        let jac = warp.coords_pose_jacobian(p);
        for (j, g) in g_pose.iter_mut().enumerate() {
            *g += gu * jac[0][j] + gv * jac[1][j];
        }
    }
}

/// Photometric loss of reconstructing `target` from `source` through `warp`,
/// with its gradient folded into `g_depth` and `g_pose` (scaled by `scale`).
fn photometric_term(
    target: &Image,
    source: &Image,
    warp: &WarpField,
    scale: f64,
    g_depth: &mut [f64],
    g_pose: &mut [f64; 6],
) -> Result<f64> {
    let recon = synthesize_view(source, warp)?;
    let loss = photometric_loss(target, &recon)?;
    let upstream = loss
        .grad(inputs::RECON)
        .expect("photometric gradient")
        .map(|g| g * scale);
    let (_, g_coords) = sample_bilinear_grad(source, &warp.coords, &upstream)?;
    chain_coords(warp, &g_coords, g_depth, g_pose);
    Ok(loss.value)
}

/// Evaluates the training objective of `config` at `model` (and the
/// source-depth model when augmentation is on) for the given step.
pub fn objective(
    config: &RunConfig,
    data: &TrainingData,
    model: &ToyModel,
    source_model: Option<&ToyModel>,
    step: usize,
) -> Result<Objective> {
    let w = &config.weights;
    let (h, wd) = (config.height, config.width);
    let depth = model.depth();
    let n_src = data.sources.len();
    let mut g_depth = vec![0.0; h * wd];
    let mut g_poses = vec![[0.0; 6]; n_src];

    let warps = model
        .poses
        .iter()
        .map(|pose| warp_field(&depth, &data.k, pose))
        .collect::<Result<Vec<_>>>()?;

    let mut photometric = 0.0;
    for (j, warp) in warps.iter().enumerate() {
        let scale = w.photo / n_src as f64;
        photometric += photometric_term(
            &data.target,
            &data.sources[j],
            warp,
            scale,
            &mut g_depth,
            &mut g_poses[j],
        )? / n_src as f64;
    }

    let smooth = smoothness_loss(&depth, &data.target, config.smoothness)?;
    for (g, s) in g_depth
        .iter_mut()
        .zip(smooth.grad(inputs::DEPTH).expect("smoothness gradient").data())
    {
        *g += w.smooth * s;
    }
    let mut value = w.photo * photometric + w.smooth * smooth.value;

    let mut depth_term = None;
    let mut grad_source_params = None;
    if let Some(src) = source_model {
        // Source-depth model: reconstruct the first source from the target.
        let src_depth = src.depth();
        let mut g_src = vec![0.0; h * wd];
        let mut g_unused = [0.0; 6];
        let back_warp = warp_field(&src_depth, &data.k, &src.poses[0])?;
        let photo = photometric_term(
            &data.sources[0],
            &data.target,
            &back_warp,
            w.photo,
            &mut g_src,
            &mut g_unused,
        )?;
        let src_smooth = smoothness_loss(&src_depth, &data.sources[0], config.smoothness)?;
        for (g, s) in g_src
            .iter_mut()
            .zip(src_smooth.grad(inputs::DEPTH).expect("smoothness gradient").data())
        {
            *g += w.smooth * s;
        }
        value += w.photo * photo + w.smooth * src_smooth.value;

        // Pseudo-label is a constant: no gradient reaches the source model.
        let label = depth_pseudo_label(&warps[0], &src_depth, &model.poses[0])?;
        let occlusion = make_occlusion_mask(h, wd, config.mask_seed.wrapping_add(step as u64))?;
        let support = depth_loss_support(&occlusion, &label.valid)?;
        if support.count() > 0 {
            let dl = depth_loss(&depth, &label.depth, &support)?;
            for (g, d) in g_depth
                .iter_mut()
                .zip(dl.grad(inputs::DEPTH_TARGET).expect("depth gradient").data())
            {
                *g += w.depth * d;
            }
            value += w.depth * dl.value;
            depth_term = Some(dl.value);
        } else {
            depth_term = Some(0.0);
        }
        let slope = src.depth_slope();
        grad_source_params = Some(Grid::from_vec(
            h,
            wd,
            1,
            g_src.iter().zip(slope.data()).map(|(g, s)| g * s).collect(),
        )?);
    }

    let mut semantic = None;
    if let Some(segs) = &data.segmentations {
        let mut warped = Vec::with_capacity(2);
        for (j, warp) in warps.iter().enumerate().take(2) {
            let mut s = sample_bilinear(segs[j + 1].probs(), &warp.coords)?;
            s.restrict(&warp.valid)?;
            warped.push(s);
        }
        // With one source the same view stands in for both neighbours.
        let (prev, next) = (&warped[0], warped.get(1).unwrap_or(&warped[0]));
        if prev.valid.count() > 0 && next.valid.count() > 0 {
            let sl = semantic_consistency_loss(
                &segs[0],
                &prev.values,
                &next.values,
                SemanticMasks::PerSource {
                    prev: &prev.valid,
                    next: &next.valid,
                },
            )?;
            for (j, name) in [inputs::SEG_PREV, inputs::SEG_NEXT].into_iter().enumerate() {
                let j = j.min(warps.len() - 1);
                let upstream = sl.grad(name).expect("semantic gradient").map(|g| g * w.ss);
                let (_, g_coords) = sample_bilinear_grad(segs[j + 1].probs(), &warps[j].coords, &upstream)?;
                chain_coords(&warps[j], &g_coords, &mut g_depth, &mut g_poses[j]);
            }
            value += w.ss * sl.value;
            semantic = Some(sl.value);
        }
    }

    let slope = model.depth_slope();
    let grad_params = Grid::from_vec(h, wd, 1, g_depth.iter().zip(slope.data()).map(|(g, s)| g * s).collect())?;
    Ok(Objective {
        value,
        photometric,
        smoothness: smooth.value,
        depth: depth_term,
        semantic,
        grad_params,
        grad_source_params,
        grad_poses: g_poses,
    })
}

/// Result of [`train_toy`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Objective value before each update.
    pub losses: Vec<f64>,
    pub metrics: MetricsRecord,
    /// Metrics restricted to the corrupted rectangle, when one was set.
    pub corrupt_region_metrics: Option<MetricsRecord>,
    pub initial_model: ToyModel,
    pub model: ToyModel,
    /// Source-depth model trained alongside when augmentation is on.
    pub source_model: Option<ToyModel>,
    pub depth: DepthMap,
    pub gt_depth: DepthMap,
}

/// Initial target and (when augmentation is on) source-depth models.
pub fn initial_models(config: &RunConfig, data: &TrainingData) -> Result<(ToyModel, Option<ToyModel>)> {
    let (h, w) = (config.height, config.width);
    let d0 = config.init_depth.unwrap_or(0.5 * (config.d_min + config.d_max));
    let mut init = Grid::filled(h, w, 1, d0);
    if let (Some(rect), Some(c)) = (config.corrupt_rect()?, config.corrupt_init) {
        for r in rect.top..rect.top + rect.height {
            for col in rect.left..rect.left + rect.width {
                init.set(r, col, 0, c.depth);
            }
        }
    }
    let poses = if config.learn_pose {
        vec![PoseSE3::identity(); data.poses.len()]
    } else {
        data.poses.clone()
    };
    let model = ToyModel::from_depth(&init, config.d_min, config.d_max, poses)?;
    let source = if config.augmentation {
        let src_init = Grid::filled(h, w, 1, d0);
        let back = vec![data.poses[0].inverse()];
        Some(ToyModel::from_depth(&src_init, config.d_min, config.d_max, back)?)
    } else {
        None
    };
    Ok((model, source))
}

/// Runs plain gradient descent for `config.steps` steps and evaluates the
/// final depth against the rendered ground truth. Writes `loss_curve.csv`,
/// `depth.pfm`, `gt_depth.pfm` and `metrics.csv` when an output directory is
/// configured.
pub fn train_toy(config: &RunConfig) -> Result<TrainReport> {
    config.validate()?;
    let data = TrainingData::render(config)?;
    let (mut model, mut source) = initial_models(config, &data)?;
    let initial_model = model.clone();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let obj = objective(config, &data, &model, source.as_ref(), step)?;
        if !obj.value.is_finite() {
            return Err(Error::Diverged { step, value: obj.value });
        }
        losses.push(obj.value);
        model.params.add_scaled(&obj.grad_params, -config.learning_rate)?;
        if let (Some(src), Some(g)) = (source.as_mut(), obj.grad_source_params.as_ref()) {
            src.params.add_scaled(g, -config.learning_rate)?;
        }
        if config.learn_pose {
            for (pose, g) in model.poses.iter_mut().zip(&obj.grad_poses) {
                let lr = config.pose_learning_rate;
                *pose = pose.left_perturbed(
                    &Vector3::new(-lr * g[0], -lr * g[1], -lr * g[2]),
                    &Vector3::new(-lr * g[3], -lr * g[4], -lr * g[5]),
                );
            }
        }
        if !model.params.all_finite() {
            return Err(Error::Diverged { step, value: f64::NAN });
        }
    }
    let depth = model.depth();
    let metrics = compute_metrics(&depth, &data.target_depth, &config.eval)?;
    let corrupt_region_metrics = match config.corrupt_rect()? {
        Some(rect) => {
            let mask = rect.to_mask(config.height, config.width);
            Some(compute_metrics_in(
                &depth,
                &data.target_depth,
                Some(&mask),
                &config.eval,
            )?)
        }
        None => None,
    };
    let report = TrainReport {
        losses,
        metrics,
        corrupt_region_metrics,
        initial_model,
        model,
        source_model: source,
        depth,
        gt_depth: data.target_depth,
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(&report, dir)?;
    }
    Ok(report)
}

pub fn write_outputs(report: &TrainReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    io::write_loss_curve(&dir.join("loss_curve.csv"), &report.losses)?;
    io::write_pfm(&dir.join("depth.pfm"), &report.depth)?;
    io::write_pfm(&dir.join("gt_depth.pfm"), &report.gt_depth)?;
    let mut rows = vec![("final".to_owned(), report.metrics)];
    if let Some(m) = report.corrupt_region_metrics {
        rows.push(("corrupt_region".to_owned(), m));
    }
    io::write_metrics_csv(&dir.join("metrics.csv"), &rows)
}

/// Means of consecutive non-overlapping blocks of `window` values; a trailing
/// partial block is dropped.
pub fn window_means(curve: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    curve
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// True when the block means of [`window_means`] never increase.
pub fn non_increasing_by_window(curve: &[f64], window: usize) -> bool {
    window_means(curve, window).windows(2).all(|p| p[1] <= p[0])
}
