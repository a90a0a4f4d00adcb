//! Depth evaluation metrics on the ground-truth support.

use rayon::prelude::*;
use thiserror::Error;

use crate::fusion::{loss_depth, loss_smooth};
use crate::grid::DepthMap;

/// Predictions are clamped to at least this depth, meters.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

/// Display factor applied to SIlog by the driving benchmark.
pub const SILOG_BENCHMARK_SCALE: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground truth has no valid pixels")]
    NoGroundTruth,
    #[error("prediction {pred_w}x{pred_h} does not match ground truth {gt_w}x{gt_h}")]
    DimensionMismatch {
        pred_w: usize,
        pred_h: usize,
        gt_w: usize,
        gt_h: usize,
    },
    #[error("prediction is not finite at pixel {0}")]
    NonFinitePrediction(usize),
    #[error("depth cap must be greater than {MIN_EVAL_DEPTH} m")]
    BadDepthCap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rms: f64,
    pub log_rms: f64,
    /// 1/m.
    pub irmse: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    /// Log-domain depth loss of the clamped prediction.
    pub loss_depth: f64,
    /// Disparity Laplacian loss of the clamped prediction.
    pub loss_smooth: f64,
}

impl MetricReport {
    /// Name and value of each metric in display order.
    pub fn entries(&self) -> [(&'static str, f64); 11] {
        [
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rms", self.rms),
            ("log_rms", self.log_rms),
            ("irmse", self.irmse),
            ("silog", self.silog),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
            ("loss_depth", self.loss_depth),
            ("loss_smooth", self.loss_smooth),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub depth_cap: f64,
    /// Multiply SIlog by [`SILOG_BENCHMARK_SCALE`].
    pub silog_benchmark_scale: bool,
}

impl EvalOptions {
    pub fn new(depth_cap: f64) -> Self {
        Self {
            depth_cap,
            silog_benchmark_scale: false,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Sums {
    n: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    log_sq: f64,
    inv_sq: f64,
    log_err: f64,
    d1: usize,
    d2: usize,
    d3: usize,
}

impl Sums {
    fn add(mut self, o: Sums) -> Sums {
        self.n += o.n;
        self.abs_rel += o.abs_rel;
        self.sq_rel += o.sq_rel;
        self.sq += o.sq;
        self.log_sq += o.log_sq;
        self.inv_sq += o.inv_sq;
        self.log_err += o.log_err;
        self.d1 += o.d1;
        self.d2 += o.d2;
        self.d3 += o.d3;
        self
    }
}

const CHUNK: usize = 4096;

pub fn evaluate(pred: &DepthMap, gt: &DepthMap, depth_cap: f64) -> Result<MetricReport, MetricsError> {
    evaluate_with(pred, gt, &EvalOptions::new(depth_cap))
}

/// Metrics over pixels where `gt` is finite and positive.
///
/// Predictions are clamped to `[MIN_EVAL_DEPTH, depth_cap]` first. Partial
/// sums are taken over fixed pixel chunks and combined in chunk order, so the
/// result does not depend on the thread count.
pub fn evaluate_with(pred: &DepthMap, gt: &DepthMap, opts: &EvalOptions) -> Result<MetricReport, MetricsError> {
    if !pred.same_shape(gt) {
        return Err(MetricsError::DimensionMismatch {
            pred_w: pred.width(),
            pred_h: pred.height(),
            gt_w: gt.width(),
            gt_h: gt.height(),
        });
    }
    if !(opts.depth_cap > MIN_EVAL_DEPTH) {
        return Err(MetricsError::BadDepthCap);
    }
    let cap = opts.depth_cap;
    let clamped = pred.map(|d| d.clamp(MIN_EVAL_DEPTH, cap));
    let support: Vec<usize> = (0..gt.len()).filter(|&i| gt.is_valid_depth(i)).collect();
    if support.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }
    if let Some(&i) = support.iter().find(|&&i| !clamped.as_slice()[i].is_finite()) {
        return Err(MetricsError::NonFinitePrediction(i));
    }

    let (p, g) = (clamped.as_slice(), gt.as_slice());
    let t1 = 1.25;
    let t2 = t1 * t1;
    let t3 = t2 * t1;
    let partials: Vec<Sums> = support
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().fold(Sums::default(), |mut s, &i| {
                let (d, dg) = (p[i], g[i]);
                let diff = d - dg;
                let e = d.ln() - dg.ln();
                let ratio = (d / dg).max(dg / d);
                s.n += 1;
                s.abs_rel += diff.abs() / dg;
                s.sq_rel += diff * diff / dg;
                s.sq += diff * diff;
                s.log_sq += e * e;
                s.inv_sq += (1.0 / d - 1.0 / dg).powi(2);
                s.log_err += e;
                s.d1 += usize::from(ratio < t1);
                s.d2 += usize::from(ratio < t2);
                s.d3 += usize::from(ratio < t3);
                s
            })
        })
        .collect();
    let s = partials.into_iter().fold(Sums::default(), Sums::add);
    let n = s.n as f64;

    let mean_e = s.log_err / n;
    // second pass about the mean keeps the variance free of cancellation
    let var_partials: Vec<f64> = support
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&i| (p[i].ln() - g[i].ln() - mean_e).powi(2))
                .sum::<f64>()
        })
        .collect();
    let var = var_partials.iter().sum::<f64>() / n;
    let mut silog = var.max(0.0).sqrt();
    if opts.silog_benchmark_scale {
        silog *= SILOG_BENCHMARK_SCALE;
    }

    let loss_depth = loss_depth(&clamped, gt).expect("support and positivity checked above");
    let loss_smooth = if clamped.as_slice().iter().all(|d| d.is_finite()) {
        loss_smooth(&clamped)
    } else {
        f64::NAN
    };

    Ok(MetricReport {
        abs_rel: s.abs_rel / n,
        sq_rel: s.sq_rel / n,
        rms: (s.sq / n).sqrt(),
        log_rms: (s.log_sq / n).sqrt(),
        irmse: (s.inv_sq / n).sqrt(),
        silog,
        delta1: s.d1 as f64 / n,
        delta2: s.d2 as f64 / n,
        delta3: s.d3 as f64 / n,
        n_pixels: s.n,
        loss_depth,
        loss_smooth,
    })
}
