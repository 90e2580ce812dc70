//! Semantic pseudo-labels from non-negative matrix factorisation.
//!
//! Rectified filter-bank responses of `N` views are stacked into a
//! `(N·H·W) × C` matrix `V`, factorised as `V ≈ P·Q` with Lee–Seung
//! multiplicative updates, and the rows of `P` (pixel-to-cluster affinities)
//! are turned into per-view segmentation maps with a softmax.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

/// Added to multiplicative-update denominators.
pub const UPDATE_EPS: f64 = 1e-9;

/// Fixed bank of square convolution kernels, each with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    size: usize,
    kernels: Vec<Vec<f64>>,
    pool_radius: usize,
}

impl FilterBank {
    pub const DEFAULT_CHANNELS: usize = 16;
    pub const DEFAULT_SIZE: usize = 5;
    pub const DEFAULT_POOL_RADIUS: usize = 3;

    /// `channels` kernels of `size × size` taps drawn from a seeded generator.
    ///
    /// Taps are zero-mean with unit L2 norm, so rectified responses measure
    /// local texture rather than brightness.
    pub fn seeded(channels: usize, size: usize, seed: u64) -> Result<Self> {
        if channels == 0 || size < 3 || size.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "filter bank needs ≥1 kernel of odd size ≥ 3, got {channels} of size {size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..channels)
            .map(|_| loop {
                let mut k: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mean = k.iter().sum::<f64>() / k.len() as f64;
                k.iter_mut().for_each(|v| *v -= mean);
                let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    k.iter_mut().for_each(|v| *v /= norm);
                    break k;
                }
            })
            .collect();
        Ok(Self {
            size,
            kernels,
            pool_radius: Self::DEFAULT_POOL_RADIUS,
        })
    }

    /// Box-averages rectified responses over a `(2r+1)²` window (edge
    /// replicated). Zero disables pooling.
    pub fn with_pool_radius(mut self, radius: usize) -> Self {
        self.pool_radius = radius;
        self
    }

    pub fn pool_radius(&self) -> usize {
        self.pool_radius
    }

    pub fn default_with_seed(seed: u64) -> Self {
        Self::seeded(Self::DEFAULT_CHANNELS, Self::DEFAULT_SIZE, seed).expect("default bank is valid")
    }

    pub fn channels(&self) -> usize {
        self.kernels.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kernels(&self) -> &[Vec<f64>] {
        &self.kernels
    }

    /// Correlates a single-channel image with every kernel (edge-replicated
    /// borders), rectifies and pools, writing `C` values per pixel into `out`.
    fn respond(&self, gray: &Grid, out: &mut [f64]) {
        let (h, w) = (gray.height() as isize, gray.width() as isize);
        let half = (self.size / 2) as isize;
        let c = self.channels();
        for r in 0..h {
            for col in 0..w {
                let p = (r * w + col) as usize;
                for (ki, kernel) in self.kernels.iter().enumerate() {
                    let mut acc = 0.0;
                    for dy in -half..=half {
                        let y = (r + dy).clamp(0, h - 1);
                        for dx in -half..=half {
                            let x = (col + dx).clamp(0, w - 1);
                            let tap = kernel[((dy + half) as usize) * self.size + (dx + half) as usize];
                            acc += tap * gray.data()[(y * w + x) as usize];
                        }
                    }
                    out[p * c + ki] = acc.max(0.0);
                }
            }
        }
        if self.pool_radius > 0 {
            box_pool(out, gray.height(), gray.width(), c, self.pool_radius);
        }
    }
}

/// Separable edge-replicated box mean over an interleaved `H×W×C` buffer.
fn box_pool(buf: &mut [f64], h: usize, w: usize, c: usize, radius: usize) {
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; buf.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let s: f64 = (-r..=r)
                    .map(|d| buf[(row * w + (col as isize + d).clamp(0, w as isize - 1) as usize) * c + ch])
                    .sum();
                tmp[(row * w + col) * c + ch] = s / norm;
            }
        }
    }
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let s: f64 = (-r..=r)
                    .map(|d| tmp[(((row as isize + d).clamp(0, h as isize - 1) as usize) * w + col) * c + ch])
                    .sum();
                buf[(row * w + col) * c + ch] = s / norm;
            }
        }
    }
}

/// Stacked non-negative activations of `N` views, one row per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<f64>,
    views: usize,
    height: usize,
    width: usize,
}

impl FeatureMatrix {
    pub fn new(data: DMatrix<f64>, views: usize, height: usize, width: usize) -> Result<Self> {
        if data.nrows() != views * height * width {
            return Err(Error::shape(format!(
                "{} rows for {views} views of {height}x{width}",
                data.nrows()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::domain(format!("feature matrix must be non-negative, found {v}")));
        }
        Ok(Self {
            data,
            views,
            height,
            width,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Rows belonging to one view.
    pub fn view_rows(&self, view: usize) -> std::ops::Range<usize> {
        let n = self.height * self.width;
        view * n..(view + 1) * n
    }
}

/// Filter-bank features of every image, stacked view after view.
pub fn extract_features(images: &[Image], bank: &FilterBank) -> Result<FeatureMatrix> {
    let first = images
        .first()
        .ok_or_else(|| Error::domain("feature extraction needs at least one image"))?;
    let (h, w) = (first.height(), first.width());
    for (i, img) in images.iter().enumerate() {
        img.expect_spatial(h, w, &format!("image {i}"))?;
    }
    let c = bank.channels();
    let n = h * w;
    // Fill row-major, then hand nalgebra the transposed layout.
    let mut rows = vec![0.0; images.len() * n * c];
    for (i, img) in images.iter().enumerate() {
        bank.respond(&img.channel_mean(), &mut rows[i * n * c..(i + 1) * n * c]);
    }
    let data = DMatrix::from_row_slice(images.len() * n, c, &rows);
    FeatureMatrix::new(data, images.len(), h, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmfOptions {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the relative change of the Frobenius error drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        Self {
            k: 4,
            max_iters: 200,
            tol: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfResult {
    /// `rows × K` pixel-to-cluster affinities.
    pub p: DMatrix<f64>,
    /// `K × C` cluster centres.
    pub q: DMatrix<f64>,
    /// `‖V − P·Q‖_F` after each iteration.
    pub error_trace: Vec<f64>,
    pub iterations_run: usize,
}

impl NmfResult {
    pub fn final_error(&self) -> f64 {
        self.error_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn relative_error(&self, v: &DMatrix<f64>) -> f64 {
        frobenius_error(v, &self.p, &self.q) / v.norm()
    }

    /// `‖Q·Qᵀ − I‖_F`; the updates do not enforce orthogonality, so this is
    /// reported as a diagnostic only.
    pub fn orthogonality_defect(&self) -> f64 {
        let k = self.q.nrows();
        (&self.q * self.q.transpose() - DMatrix::<f64>::identity(k, k)).norm()
    }

    /// Arg-max cluster of each row of `P` (ties go to the lowest index).
    pub fn row_labels(&self) -> Vec<usize> {
        (0..self.p.nrows())
            .map(|r| argmax(self.p.row(r).iter().copied()))
            .collect()
    }
}

fn frobenius_error(v: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (v - p * q).norm()
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// FNV-1a over the bit patterns of `row`, mixed with `seed`.
fn row_seed<'a>(seed: u64, row: impl Iterator<Item = &'a f64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for x in row {
        for b in x.to_bits().to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Factorises `v ≈ P·Q` under the Frobenius objective with multiplicative
/// updates `P ← P⊙(VQᵀ)⊘(PQQᵀ+ε)`, `Q ← Q⊙(PᵀV)⊘(PᵀPQ+ε)`.
pub fn nmf_factorize(v: &DMatrix<f64>, opts: &NmfOptions) -> Result<NmfResult> {
    let (rows, cols) = v.shape();
    if let Some(bad) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::domain(format!(
            "NMF input must be finite and non-negative, found {bad}"
        )));
    }
    if opts.k < 1 || opts.k > rows.min(cols) {
        return Err(Error::domain(format!(
            "cluster count K = {} outside [1, {}]",
            opts.k,
            rows.min(cols)
        )));
    }
    let k = opts.k;
    // Uniform on (0, 1]. Each row of P is seeded by its row of V, so equal
    // rows stay equal and the result is equivariant to row permutations.
    let mut p = DMatrix::zeros(rows, k);
    for r in 0..rows {
        let mut rng = ChaCha8Rng::seed_from_u64(row_seed(opts.seed, v.row(r).iter()));
        for c in 0..k {
            p[(r, c)] = 1.0 - rng.gen::<f64>();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut q = DMatrix::from_fn(k, cols, |_, _| 1.0 - rng.gen::<f64>());

    let mut trace = Vec::with_capacity(opts.max_iters);
    for _ in 0..opts.max_iters {
        let numer = v * q.transpose();
        let denom = &p * (&q * q.transpose());
        p.zip_zip_apply(&numer, &denom, |x, n, d| *x *= n / (d + UPDATE_EPS));

        let numer = p.transpose() * v;
        let denom = (p.transpose() * &p) * &q;
        q.zip_zip_apply(&numer, &denom, |x, n, d| *x *= n / (d + UPDATE_EPS));

        let err = frobenius_error(v, &p, &q);
        let prev = trace.last().copied();
        trace.push(err);
        if err == 0.0 {
            break;
        }
        if let Some(prev) = prev {
            if (prev - err).abs() / prev.max(f64::MIN_POSITIVE) < opts.tol {
                break;
            }
        }
    }
    Ok(NmfResult {
        p,
        q,
        iterations_run: trace.len(),
        error_trace: trace,
    })
}

/// `H×W×K` per-pixel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    probs: Grid,
}

impl SegmentationMap {
    /// Fails unless every pixel's vector is non-negative and sums to 1 within 1e-9.
    pub fn new(probs: Grid) -> Result<Self> {
        if probs.channels() == 0 {
            return Err(Error::shape("segmentation needs at least one class"));
        }
        for p in 0..probs.len_pixels() {
            let px = probs.pixel(p);
            let sum: f64 = px.iter().sum();
            if px.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("pixel {p} is not a probability vector: {px:?}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Grid {
        &self.probs
    }

    pub fn into_probs(self) -> Grid {
        self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.channels()
    }

    pub fn height(&self) -> usize {
        self.probs.height()
    }

    pub fn width(&self) -> usize {
        self.probs.width()
    }

    /// Arg-max class per pixel, lowest index on ties.
    pub fn argmax_labels(&self) -> Vec<usize> {
        (0..self.probs.len_pixels())
            .map(|p| argmax(self.probs.pixel(p).iter().copied()))
            .collect()
    }
}

/// Splits `P` into `views` blocks of `height·width` rows and applies a
/// row-wise softmax of `P / temperature`.
pub fn build_segmentations(
    p: &DMatrix<f64>,
    views: usize,
    height: usize,
    width: usize,
    temperature: f64,
) -> Result<Vec<SegmentationMap>> {
    if p.nrows() != views * height * width {
        return Err(Error::shape(format!(
            "P has {} rows, expected {views}·{height}·{width}",
            p.nrows()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let k = p.ncols();
    let n = height * width;
    (0..views)
        .map(|view| {
            let mut probs = Grid::zeros(height, width, k);
            for px in 0..n {
                let row = p.row(view * n + px);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let out = probs.pixel_mut(px);
                let mut sum = 0.0;
                for (o, &x) in out.iter_mut().zip(row.iter()) {
                    *o = ((x - max) / temperature).exp();
                    sum += *o;
                }
                out.iter_mut().for_each(|o| *o /= sum);
            }
            SegmentationMap::new(probs)
        })
        .collect()
}

/// Probability 1 on the arg-max class of each pixel (lowest index on ties).
pub fn one_hot(s: &SegmentationMap) -> SegmentationMap {
    let labels = s.argmax_labels();
    let probs = Grid::from_fn(s.height(), s.width(), s.classes(), |r, c, ch| {
        if labels[r * s.width() + c] == ch {
            1.0
        } else {
            0.0
        }
    });
    SegmentationMap { probs }
}

/// Fraction of items whose predicted cluster agrees with the majority truth
/// label of that cluster.
pub fn cluster_purity(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    if predicted.is_empty() {
        return 1.0;
    }
    let kp = predicted.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; kt]; kp];
    for (&a, &b) in predicted.iter().zip(truth) {
        counts[a][b] += 1;
    }
    let agree: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    agree as f64 / predicted.len() as f64
}
