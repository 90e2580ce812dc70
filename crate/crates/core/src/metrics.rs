//! Depth evaluation statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, Mask};

/// Floor applied to predictions before evaluation, mm.
pub const DEPTH_FLOOR_MM: f64 = 1e-3;

/// Depth cap for abdominal scenes, mm.
pub const CAP_ABDOMINAL_MM: f64 = 150.0;

/// Depth cap for CT-registered scenes, mm.
pub const CAP_CT_MM: f64 = 180.0;

pub const DEFAULT_DELTA_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub cap_mm: f64,
    /// Rescale predictions by `median(gt)/median(pred)` first.
    pub median_scale: bool,
    pub delta_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cap_mm: CAP_ABDOMINAL_MM,
            median_scale: true,
            delta_threshold: DEFAULT_DELTA_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Fraction in `[0, 1]` of pixels with `max(d*/d, d/d*) < threshold`.
    pub delta: f64,
    pub n_pixels: usize,
    /// Factor applied to the prediction; 1 without median scaling.
    pub scale_ratio: f64,
}

/// `min(D, cap)` elementwise, floored at [`DEPTH_FLOOR_MM`].
pub fn clamp_depth(depth: &DepthMap, cap_mm: f64) -> Result<DepthMap> {
    if !(cap_mm > 0.0) {
        return Err(Error::domain(format!("depth cap must be positive, got {cap_mm}")));
    }
    Ok(depth.map(|d| d.min(cap_mm).max(DEPTH_FLOOR_MM)))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Evaluates `pred` against `gt` over pixels with `0 < gt ≤ cap`.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, opts: &EvalOptions) -> Result<MetricsRecord> {
    compute_metrics_in(pred, gt, None, opts)
}

/// [`compute_metrics`] restricted to pixels set in `region`.
pub fn compute_metrics_in(
    pred: &DepthMap,
    gt: &DepthMap,
    region: Option<&Mask>,
    opts: &EvalOptions,
) -> Result<MetricsRecord> {
    pred.expect_shape(gt, "metrics")?;
    if pred.channels() != 1 {
        return Err(Error::shape("depth maps must have one channel"));
    }
    if let Some(m) = region {
        m.expect_dims(gt.height(), gt.width(), "metrics region")?;
    }
    if !(opts.cap_mm > 0.0) || !(opts.delta_threshold > 0.0) {
        return Err(Error::domain("cap and delta threshold must be positive"));
    }
    let idx: Vec<usize> = (0..gt.len_pixels())
        .filter(|&p| {
            let g = gt.data()[p];
            g > 0.0 && g <= opts.cap_mm && region.is_none_or(|m| m.at(p))
        })
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptySupport("no ground-truth pixels inside (0, cap]"));
    }
    let gts: Vec<f64> = idx.iter().map(|&p| gt.data()[p]).collect();
    let mut preds: Vec<f64> = idx.iter().map(|&p| pred.data()[p]).collect();

    let scale_ratio = if opts.median_scale {
        let mg = median(&mut gts.clone());
        let mp = median(&mut preds.clone());
        if !(mp > 0.0) {
            return Err(Error::domain("median prediction must be positive for median scaling"));
        }
        mg / mp
    } else {
        1.0
    };
    for d in preds.iter_mut() {
        *d = (*d * scale_ratio).min(opts.cap_mm).max(DEPTH_FLOOR_MM);
    }

    let n = idx.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log, mut hits) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (&g, &d) in gts.iter().zip(&preds) {
        let diff = (g - d).abs();
        abs_rel += diff / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        let l = g.ln() - d.ln();
        sq_log += l * l;
        if (g / d).max(d / g) < opts.delta_threshold {
            hits += 1;
        }
    }
    Ok(MetricsRecord {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (sq / n).sqrt(),
        rmse_log: (sq_log / n).sqrt(),
        delta: hits as f64 / n,
        n_pixels: idx.len(),
        scale_ratio,
    })
}

/// Named evaluation frame.
pub struct Frame<'a> {
    pub name: String,
    pub pred: &'a DepthMap,
    pub gt: &'a DepthMap,
}

/// Evaluates every frame in order.
pub fn evaluate_batch(frames: &[Frame<'_>], opts: &EvalOptions) -> Result<Vec<(String, MetricsRecord)>> {
    frames
        .iter()
        .map(|f| compute_metrics(f.pred, f.gt, opts).map(|m| (f.name.clone(), m)))
        .collect()
}

pub const CSV_HEADER: &str = "frame,abs_rel,sq_rel,rmse,rmse_log,delta,scale_ratio,n_pixels";

/// Writes one row per frame and a final `mean` row. The `mean` row averages
/// every statistic and reports the total pixel count.
pub fn write_csv<W: Write>(rows: &[(String, MetricsRecord)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    let fmt = |out: &mut W, name: &str, m: &MetricsRecord| {
        writeln!(
            out,
            "{name},{},{},{},{},{},{},{}",
            m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta, m.scale_ratio, m.n_pixels
        )
    };
    for (name, m) in rows {
        fmt(&mut out, name, m)?;
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricsRecord) -> f64| rows.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
        let mean = MetricsRecord {
            abs_rel: avg(|m| m.abs_rel),
            sq_rel: avg(|m| m.sq_rel),
            rmse: avg(|m| m.rmse),
            rmse_log: avg(|m| m.rmse_log),
            delta: avg(|m| m.delta),
            scale_ratio: avg(|m| m.scale_ratio),
            n_pixels: rows.iter().map(|(_, m)| m.n_pixels).sum(),
        };
        fmt(&mut out, "mean", &mean)?;
    }
    Ok(())
}
