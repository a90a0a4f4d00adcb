//! Source-frame selection, proposal fusion and the fusion losses.

use nalgebra::Vector3;
use std::path::PathBuf;
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::geometry::DepthProposal;
use crate::grid::{ConfidenceMap, DepthMap, Grid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no source frame moves more than the threshold in the {0} direction")]
    NoValidSource(Direction),
    #[error("frame position {index} is outside a sequence of {len} frames")]
    BadFrameIndex { index: usize, len: usize },
    #[error("invalid frame sequence: {0}")]
    InvalidSequence(String),
    #[error("no proposals to fuse")]
    EmptyInput,
    #[error("no pixel of any proposal clears the confidence floor")]
    AllInvalid,
    #[error("proposal sizes disagree: {0}")]
    DimensionMismatch(String),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("ground truth has no valid pixels")]
    NoGroundTruth,
    #[error("prediction is not positive at pixel {0} where ground truth exists")]
    NonPositivePrediction(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Backward,
    Forward,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Backward => "backward",
            Direction::Forward => "forward",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Camera center in a common world frame, meters.
    pub center: Vector3<f64>,
    pub intrinsics: Option<Intrinsics>,
    pub image: Option<PathBuf>,
}

/// Frames ordered by strictly increasing index.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self, FusionError> {
        for pair in frames.windows(2) {
            if pair[1].index <= pair[0].index {
                return Err(FusionError::InvalidSequence(format!(
                    "frame index {} follows {}",
                    pair[1].index, pair[0].index
                )));
            }
        }
        if let Some(f) = frames.iter().find(|f| !f.center.iter().all(|c| c.is_finite())) {
            return Err(FusionError::InvalidSequence(format!(
                "frame {} has a non-finite camera center",
                f.index
            )));
        }
        Ok(Self { frames })
    }

    /// Frames numbered `0..n` from bare camera centers.
    pub fn from_centers(centers: &[Vector3<f64>]) -> Result<Self, FusionError> {
        Self::new(
            centers
                .iter()
                .enumerate()
                .map(|(index, c)| Frame {
                    index,
                    center: *c,
                    intrinsics: None,
                    image: None,
                })
                .collect(),
        )
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Position of the frame carrying `index`.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.frames.binary_search_by_key(&index, |f| f.index).ok()
    }
}

/// Smallest offset `k ≥ 1` in `direction` with `‖O_{t±k} − O_t‖ > threshold`.
///
/// `t` is a position in the sequence.
pub fn search_source_offset(
    seq: &FrameSequence,
    t: usize,
    threshold: f64,
    direction: Direction,
) -> Result<usize, FusionError> {
    let frames = seq.frames();
    if t >= frames.len() {
        return Err(FusionError::BadFrameIndex {
            index: t,
            len: frames.len(),
        });
    }
    let origin = frames[t].center;
    let far_enough = |s: usize| (frames[s].center - origin).norm() > threshold;
    let found = match direction {
        Direction::Backward => (1..=t).find(|&k| far_enough(t - k)),
        Direction::Forward => (1..frames.len() - t).find(|&k| far_enough(t + k)),
    };
    found.ok_or(FusionError::NoValidSource(direction))
}

/// Result of [`select_source_frames`]: the backward offset `k₁` and forward
/// offset `k₂`, each searched independently.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSelection {
    pub backward: Result<usize, FusionError>,
    pub forward: Result<usize, FusionError>,
}

impl SourceSelection {
    /// Sequence positions of the selected sources.
    pub fn positions(&self, t: usize) -> Vec<usize> {
        let mut out = Vec::new();
        if let Ok(k) = self.backward {
            out.push(t - k);
        }
        if let Ok(k) = self.forward {
            out.push(t + k);
        }
        out
    }
}

pub fn select_source_frames(seq: &FrameSequence, t: usize, threshold: f64) -> SourceSelection {
    SourceSelection {
        backward: search_source_offset(seq, t, threshold, Direction::Backward),
        forward: search_source_offset(seq, t, threshold, Direction::Forward),
    }
}

/// Depth from another method, with optional per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalProposal {
    pub depth: DepthMap,
    pub confidence: Option<ConfidenceMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Flow(DepthProposal),
    External(ExternalProposal),
}

impl Proposal {
    fn shape(&self) -> (usize, usize) {
        match self {
            Proposal::Flow(p) => (p.width(), p.height()),
            Proposal::External(e) => (e.depth.width(), e.depth.height()),
        }
    }

    /// `(depth, weight)` at pixel `i`, or `None` if the pixel has no usable depth.
    fn sample(&self, i: usize, default_confidence: f64) -> Option<(f64, f64)> {
        match self {
            Proposal::Flow(p) => {
                if !p.positive_mask.as_slice()[i] {
                    return None;
                }
                Some((p.depth.as_slice()[i], p.confidence.as_slice()[i]))
            }
            Proposal::External(e) => {
                if !e.depth.is_valid_depth(i) {
                    return None;
                }
                let c = e
                    .confidence
                    .as_ref()
                    .map_or(default_confidence, |c| c.as_slice()[i]);
                Some((e.depth.as_slice()[i], c))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Minimum camera translation for a source frame, meters.
    pub translation_threshold: f64,
    /// Proposal pixels with confidence below this are ignored.
    pub min_confidence: f64,
    /// Confidence given to external proposals that carry none.
    pub external_confidence: f64,
    /// Largest output depth, meters.
    pub depth_cap: f64,
}

impl FusionConfig {
    /// Outdoor driving sequences.
    pub fn driving() -> Self {
        Self {
            translation_threshold: 0.80,
            min_confidence: 0.05,
            external_confidence: 0.5,
            depth_cap: 80.0,
        }
    }

    /// Hand-held indoor sequences.
    pub fn indoor() -> Self {
        Self {
            translation_threshold: 0.12,
            depth_cap: 10.0,
            ..Self::driving()
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.to_string()));
        if !(self.translation_threshold > 0.0) {
            return bad("translation threshold must be > 0");
        }
        if !(0.0..1.0).contains(&self.min_confidence) {
            return bad("min_confidence must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.external_confidence) {
            return bad("external confidence must lie in [0, 1]");
        }
        if !(self.depth_cap > 0.0) {
            return bad("depth cap must be > 0");
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::driving()
    }
}

/// Confidence-weighted fusion in disparity space.
///
/// At each pixel the proposals whose confidence clears `min_confidence` are
/// averaged as `Σ wᵢ/dᵢ / Σ wᵢ`. Pixels without any such proposal take the
/// value of the nearest fused pixel (Euclidean distance). The output is
/// capped at `depth_cap`.
pub fn fuse_proposals(proposals: &[Proposal], cfg: &FusionConfig) -> Result<DepthMap, FusionError> {
    cfg.validate()?;
    let Some(first) = proposals.first() else {
        return Err(FusionError::EmptyInput);
    };
    let (width, height) = first.shape();
    if let Some(p) = proposals.iter().find(|p| p.shape() != (width, height)) {
        let (w, h) = p.shape();
        return Err(FusionError::DimensionMismatch(format!(
            "{w}x{h} vs {width}x{height}"
        )));
    }

    let n = width * height;
    let mut fused = vec![f64::NAN; n];
    let mut known = vec![false; n];
    for i in 0..n {
        let mut num = 0.0;
        let mut den = 0.0;
        for p in proposals {
            let Some((d, w)) = p.sample(i, cfg.external_confidence) else {
                continue;
            };
            if w >= cfg.min_confidence && w > 0.0 && d > 0.0 && d.is_finite() {
                num += w / d;
                den += w;
            }
        }
        if den > 0.0 {
            fused[i] = den / num;
            known[i] = true;
        }
    }
    if !known.iter().any(|&k| k) {
        return Err(FusionError::AllInvalid);
    }

    let nearest = nearest_known(width, height, &known);
    let data = (0..n)
        .map(|i| fused[nearest[i]].min(cfg.depth_cap))
        .collect();
    Ok(Grid::from_vec(width, height, data).expect("shape"))
}

/// For every pixel, the linear index of the nearest `known` pixel.
///
/// Exact Euclidean nearest neighbour via two passes of the lower-envelope
/// distance transform (Felzenszwalb & Huttenlocher). Needs at least one known pixel.
pub fn nearest_known(width: usize, height: usize, known: &[bool]) -> Vec<usize> {
    const FAR: f64 = 1e30;
    // column pass: nearest known row within each column
    let mut col_dist = vec![FAR; width * height];
    let mut col_row = vec![0usize; width * height];
    let mut f = vec![0.0; height.max(width)];
    let mut dist = vec![0.0; height.max(width)];
    let mut arg = vec![0usize; height.max(width)];
    for u in 0..width {
        for v in 0..height {
            f[v] = if known[v * width + u] { 0.0 } else { FAR };
        }
        envelope_1d(&f[..height], &mut dist[..height], &mut arg[..height]);
        for v in 0..height {
            col_dist[v * width + u] = dist[v];
            col_row[v * width + u] = arg[v];
        }
    }
    // row pass over the column distances
    let mut out = vec![0usize; width * height];
    for v in 0..height {
        f[..width].copy_from_slice(&col_dist[v * width..(v + 1) * width]);
        envelope_1d(&f[..width], &mut dist[..width], &mut arg[..width]);
        for u in 0..width {
            let src_u = arg[u];
            out[v * width + u] = col_row[v * width + src_u] * width + src_u;
        }
    }
    out
}

/// `dist[q] = min_p (q − p)² + f[p]` and the minimizing `p`.
fn envelope_1d(f: &[f64], dist: &mut [f64], arg: &mut [usize]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut hull = vec![0usize; n];
    let mut bounds = vec![0.0f64; n + 1];
    let mut k = 0;
    bounds[0] = f64::NEG_INFINITY;
    bounds[1] = f64::INFINITY;
    let intersect = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf))
    };
    for q in 1..n {
        let mut s = intersect(hull[k], q);
        while s <= bounds[k] {
            k -= 1;
            s = intersect(hull[k], q);
        }
        k += 1;
        hull[k] = q;
        bounds[k] = s;
        bounds[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = hull[k];
        let d = q as f64 - p as f64;
        dist[q] = d * d + f[p];
        arg[q] = p;
    }
}

/// Loss weights `λ_d` and `λ_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub depth: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            smooth: 0.5,
        }
    }
}

/// `Σ_p |log D_p − log D̂_p|` over pixels with ground truth.
pub fn loss_depth(pred: &DepthMap, gt: &DepthMap) -> Result<f64, FusionError> {
    if !pred.same_shape(gt) {
        return Err(FusionError::DimensionMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..gt.len() {
        if !gt.is_valid_depth(i) {
            continue;
        }
        if !pred.is_valid_depth(i) {
            return Err(FusionError::NonPositivePrediction(i));
        }
        sum += (pred.as_slice()[i].ln() - gt.as_slice()[i].ln()).abs();
        count += 1;
    }
    if count == 0 {
        return Err(FusionError::NoGroundTruth);
    }
    Ok(sum)
}

/// `Σ_p |∇²(1/D)_p|` over interior pixels, 5-point stencil.
pub fn loss_smooth(pred: &DepthMap) -> f64 {
    let (w, h) = (pred.width(), pred.height());
    if w < 3 || h < 3 {
        return 0.0;
    }
    let disp = |u: usize, v: usize| 1.0 / pred.get(u, v);
    let mut sum = 0.0;
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let lap = disp(u - 1, v) + disp(u + 1, v) + disp(u, v - 1) + disp(u, v + 1)
                - 4.0 * disp(u, v);
            sum += lap.abs();
        }
    }
    sum
}

/// `λ_d L_depth + λ_s L_smooth`.
pub fn total_loss(pred: &DepthMap, gt: &DepthMap, weights: &LossWeights) -> Result<f64, FusionError> {
    Ok(weights.depth * loss_depth(pred, gt)? + weights.smooth * loss_smooth(pred))
}
