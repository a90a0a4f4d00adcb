//! End-to-end processing of a frame sequence on disk.
//!
//! Layout:
//!
//! * `flow_dir/TTTTTT_SSSSSS.flo`: flow from target frame `T` to source `S`
//! * `pose_file`: one world-from-camera line per frame, frame `i` on line `i`
//! * `gt_dir/TTTTTT.{png,fdm}`: optional ground truth
//! * `<external>/TTTTTT.{png,fdm}` with optional `TTTTTT_conf.fdm`
//!
//! Outputs go to `output_dir/{depth,proposals,poses,metrics,viz}`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::fusion::{
    fuse_proposals, select_source_frames, ExternalProposal, FusionConfig, FusionError, Proposal,
};
use crate::geometry::{check_frame_size, flow_to_depth, ConfidenceParams, GeometryError};
use crate::grid::DepthMap;
use crate::io::{self, IoError};
use crate::kv::{KvConfig, KvError};
use crate::metrics::{evaluate_with, EvalOptions, MetricReport, MetricsError};
use crate::refine::{refine_pose, RefineError, RefinementConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] KvError),
    #[error("config: {0}")]
    Invalid(String),
    #[error("{0}: path does not exist")]
    MissingPath(PathBuf),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("frame {frame}: {source}")]
    Geometry { frame: usize, source: GeometryError },
    #[error("frame {frame}: {source}")]
    Refine { frame: usize, source: RefineError },
    #[error("frame {frame}: {source}")]
    Fusion { frame: usize, source: FusionError },
    #[error("frame {frame}: {source}")]
    Metrics { frame: usize, source: MetricsError },
    #[error("frame {0}: no depth proposals (no usable source frame or external proposal)")]
    NoProposals(usize),
    #[error("frame {frame} is not in the pose file ({frames} frames)")]
    UnknownFrame { frame: usize, frames: usize },
    #[error("{0}")]
    Output(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub flow_dir: PathBuf,
    pub pose_file: PathBuf,
    pub intrinsics_file: PathBuf,
    pub gt_dir: Option<PathBuf>,
    pub external_dirs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// Target frames; all frames with flow files when empty.
    pub frames: Vec<usize>,
    pub confidence: ConfidenceParams,
    pub refinement: RefinementConfig,
    pub fusion: FusionConfig,
    pub refine: bool,
    pub visualize: bool,
    pub silog_benchmark_scale: bool,
}

const KEYS: &[&str] = &[
    "flow_dir",
    "pose_file",
    "intrinsics_file",
    "gt_dir",
    "external_dirs",
    "output_dir",
    "frames",
    "sigma",
    "refine",
    "visualize",
    "silog_scaling",
    "max_iterations",
    "gradient_tolerance",
    "objective_tolerance",
    "rotation_bound",
    "initial_step",
    "preset",
    "translation_threshold",
    "min_confidence",
    "external_confidence",
    "depth_cap",
];

fn list(value: Option<&str>) -> impl Iterator<Item = &str> {
    value
        .unwrap_or("")
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
}

impl PipelineConfig {
    /// Parses a key-value config. Relative paths are taken from `base`.
    pub fn from_kv(cfg: &KvConfig, base: &Path) -> Result<Self, PipelineError> {
        cfg.check_keys(KEYS)?;
        let path = |key: &str| -> Result<PathBuf, PipelineError> { Ok(base.join(cfg.require::<String>(key)?)) };
        let opt_path = |key: &str| -> Result<Option<PathBuf>, PipelineError> {
            Ok(cfg.get::<String>(key)?.map(|p| base.join(p)))
        };
        let frames = list(cfg.raw("frames"))
            .map(|s| {
                s.parse::<usize>().map_err(|_| KvError::BadValue {
                    key: "frames".into(),
                    value: s.into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let confidence = ConfidenceParams::new(cfg.get_or("sigma", crate::geometry::DEFAULT_SIGMA)?)
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;

        let defaults = RefinementConfig::default();
        let bound: f64 = cfg.get_or("rotation_bound", defaults.rotation_bounds.1)?;
        let refinement = RefinementConfig {
            max_iterations: cfg.get_or("max_iterations", defaults.max_iterations)?,
            gradient_tolerance: cfg.get_or("gradient_tolerance", defaults.gradient_tolerance)?,
            objective_tolerance: cfg.get_or("objective_tolerance", defaults.objective_tolerance)?,
            rotation_bounds: (-bound, bound),
            initial_step: cfg.get_or("initial_step", defaults.initial_step)?,
            finite_difference_gradient: false,
        };
        refinement
            .validate()
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;

        let preset = match cfg.raw("preset").unwrap_or("driving") {
            "driving" => FusionConfig::driving(),
            "indoor" => FusionConfig::indoor(),
            other => {
                return Err(KvError::BadValue {
                    key: "preset".into(),
                    value: other.into(),
                }
                .into())
            }
        };
        let fusion = FusionConfig {
            translation_threshold: cfg.get_or("translation_threshold", preset.translation_threshold)?,
            min_confidence: cfg.get_or("min_confidence", preset.min_confidence)?,
            external_confidence: cfg.get_or("external_confidence", preset.external_confidence)?,
            depth_cap: cfg.get_or("depth_cap", preset.depth_cap)?,
        };
        fusion
            .validate()
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;

        let out = Self {
            flow_dir: path("flow_dir")?,
            pose_file: path("pose_file")?,
            intrinsics_file: path("intrinsics_file")?,
            gt_dir: opt_path("gt_dir")?,
            external_dirs: list(cfg.raw("external_dirs")).map(|p| base.join(p)).collect(),
            output_dir: path("output_dir")?,
            frames,
            confidence,
            refinement,
            fusion,
            refine: cfg.get_bool("refine", true)?,
            visualize: cfg.get_bool("visualize", false)?,
            silog_benchmark_scale: cfg.get_bool("silog_scaling", false)?,
        };
        out.check_paths()?;
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| PipelineError::MissingPath(path.to_path_buf()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&KvConfig::parse(&text)?, base)
    }

    fn check_paths(&self) -> Result<(), PipelineError> {
        let inputs = [&self.flow_dir, &self.pose_file, &self.intrinsics_file]
            .into_iter()
            .chain(self.gt_dir.iter())
            .chain(self.external_dirs.iter());
        for p in inputs {
            if !p.exists() {
                return Err(PipelineError::MissingPath(p.clone()));
            }
        }
        Ok(())
    }
}

pub fn flow_file_name(target: usize, source: usize) -> String {
    format!("{target:06}_{source:06}.flo")
}

pub fn frame_stem(frame: usize) -> String {
    format!("{frame:06}")
}

/// First existing `dir/stem.{fdm,png}`.
fn find_depth(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["fdm", "png"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.exists())
}

/// Target frames that have at least one flow file.
fn frames_with_flow(flow_dir: &Path) -> Result<Vec<usize>, PipelineError> {
    let entries = fs::read_dir(flow_dir).map_err(|error| IoError::Io {
        path: flow_dir.to_path_buf(),
        error,
    })?;
    let mut frames: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let stem = name.strip_suffix(".flo")?;
            let (t, s) = stem.split_once('_')?;
            s.parse::<usize>().ok()?;
            t.parse::<usize>().ok()
        })
        .collect();
    frames.sort_unstable();
    frames.dedup();
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub target: usize,
    /// Source frames that produced a proposal.
    pub sources: Vec<usize>,
    pub external: usize,
    pub metrics: Option<MetricReport>,
    pub depth_path: PathBuf,
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|error| {
        IoError::Io {
            path: path.to_path_buf(),
            error,
        }
        .into()
    })
}

pub fn metrics_to_kv(report: &MetricReport) -> KvConfig {
    let mut kv = KvConfig::new();
    for (name, value) in report.entries() {
        kv.set(name, value);
    }
    kv.set("n_pixels", report.n_pixels);
    kv
}

/// Runs every target frame, in parallel across frames.
///
/// Fails if any frame fails; successful frames still leave their outputs.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<FrameOutcome>, PipelineError> {
    let poses = io::read_poses(&cfg.pose_file)?;
    let seq = io::sequence_from_poses(&poses)?;
    let camera = io::read_intrinsics(&cfg.intrinsics_file)?;
    let targets = if cfg.frames.is_empty() {
        frames_with_flow(&cfg.flow_dir)?
    } else {
        cfg.frames.clone()
    };
    if targets.is_empty() {
        return Err(PipelineError::Invalid(format!(
            "no flow files found in {}",
            cfg.flow_dir.display()
        )));
    }
    for sub in ["depth", "proposals", "poses", "metrics"] {
        create_dir(&cfg.output_dir.join(sub))?;
    }
    if cfg.visualize {
        create_dir(&cfg.output_dir.join("viz"))?;
    }

    let results: Vec<Result<FrameOutcome, PipelineError>> = targets
        .par_iter()
        .map(|&t| run_frame(cfg, &poses, &seq, &camera, t))
        .collect();
    let mut outcomes = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::error!("{e}");
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(outcomes),
    }
}

fn run_frame(
    cfg: &PipelineConfig,
    poses: &[crate::camera::RelativePose],
    seq: &crate::fusion::FrameSequence,
    camera: &io::CameraFile,
    t: usize,
) -> Result<FrameOutcome, PipelineError> {
    if t >= poses.len() {
        return Err(PipelineError::UnknownFrame {
            frame: t,
            frames: poses.len(),
        });
    }
    let k: &Intrinsics = &camera.intrinsics;
    let out = &cfg.output_dir;
    let stem = frame_stem(t);
    let selection = select_source_frames(seq, t, cfg.fusion.translation_threshold);
    for r in [&selection.backward, &selection.forward] {
        if let Err(e) = r {
            log::info!("frame {t}: {e}");
        }
    }

    let mut proposals = Vec::new();
    let mut sources = Vec::new();
    for s in selection.positions(t) {
        let flow_path = cfg.flow_dir.join(flow_file_name(t, s));
        if !flow_path.exists() {
            log::warn!("frame {t}: selected source {s} has no flow file {}", flow_path.display());
            continue;
        }
        let flow = io::read_flow(&flow_path)?;
        if let Some((w, h)) = camera.size {
            check_frame_size(&flow, w, h).map_err(|source| PipelineError::Geometry { frame: t, source })?;
        }
        let mut pose = io::relative_pose(&poses[t], &poses[s]);
        if cfg.refine {
            let res = refine_pose(&flow, k, &pose, k, &cfg.confidence, &cfg.refinement)
                .map_err(|source| PipelineError::Refine { frame: t, source })?;
            log::info!(
                "frame {t} <- {s}: confidence {:.3} -> {:.3} in {} iterations",
                res.initial_objective,
                res.final_objective,
                res.iterations
            );
            pose = res.refined_pose;
        }
        io::write_poses(out.join("poses").join(format!("{stem}_{s:06}.txt")), &[pose])?;
        let proposal = flow_to_depth(&flow, k, &pose, k, &cfg.confidence)
            .map_err(|source| PipelineError::Geometry { frame: t, source })?;
        let base = out.join("proposals").join(format!("{stem}_{s:06}"));
        io::write_depth(base.with_extension("fdm"), &proposal.masked_depth())?;
        io::write_confidence(base.with_file_name(format!("{stem}_{s:06}_conf.fdm")), &proposal.confidence)?;
        if cfg.visualize {
            let viz = out.join("viz");
            io::write_confidence_image(viz.join(format!("{stem}_{s:06}_conf.png")), &proposal.confidence)?;
            io::write_depth_image(viz.join(format!("{stem}_{s:06}_depth.png")), &proposal.masked_depth())?;
        }
        proposals.push(Proposal::Flow(proposal));
        sources.push(s);
    }

    let mut external = 0;
    for dir in &cfg.external_dirs {
        let Some(path) = find_depth(dir, &stem) else {
            log::warn!("frame {t}: no external proposal in {}", dir.display());
            continue;
        };
        let conf_path = dir.join(format!("{stem}_conf.fdm"));
        let confidence = if conf_path.exists() {
            Some(io::read_confidence(&conf_path)?)
        } else {
            None
        };
        proposals.push(Proposal::External(ExternalProposal {
            depth: io::read_depth(&path)?,
            confidence,
        }));
        external += 1;
    }
    if proposals.is_empty() {
        return Err(PipelineError::NoProposals(t));
    }

    let fused: DepthMap =
        fuse_proposals(&proposals, &cfg.fusion).map_err(|source| PipelineError::Fusion { frame: t, source })?;
    let depth_path = out.join("depth").join(format!("{stem}.fdm"));
    io::write_depth(&depth_path, &fused)?;
    if cfg.visualize {
        io::write_depth_image(out.join("viz").join(format!("{stem}_fused.png")), &fused)?;
    }

    let metrics = match cfg.gt_dir.as_ref().and_then(|d| find_depth(d, &stem)) {
        Some(gt_path) => {
            let gt = io::read_depth(&gt_path)?;
            let opts = EvalOptions {
                depth_cap: cfg.fusion.depth_cap,
                silog_benchmark_scale: cfg.silog_benchmark_scale,
            };
            let report =
                evaluate_with(&fused, &gt, &opts).map_err(|source| PipelineError::Metrics { frame: t, source })?;
            let path = out.join("metrics").join(format!("{stem}.txt"));
            fs::write(&path, metrics_to_kv(&report).to_string())
                .map_err(|e| PipelineError::Output(format!("{}: {e}", path.display())))?;
            Some(report)
        }
        None => None,
    };

    Ok(FrameOutcome {
        target: t,
        sources,
        external,
        metrics,
        depth_path,
    })
}
