//! Geometric video depth from optical flow.
//!
//! Given dense flow between a target frame and a source frame and their
//! relative pose, every target pixel is triangulated in closed form, and the
//! reprojection error left over becomes a confidence. The summed confidence
//! is a differentiable function of the pose, which is refined by bounded
//! L-BFGS. Proposals from several source frames (and from other methods) are
//! fused into one depth map and scored with the standard depth metrics.

pub mod camera;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod kv;
pub mod lbfgsb;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod synth;

pub use camera::{Intrinsics, RelativePose};
pub use geometry::{flow_to_depth, triangulate_pixel, ConfidenceParams, DepthProposal};
pub use fusion::{fuse_proposals, select_source_frames, FusionConfig, FrameSequence};
pub use grid::{ConfidenceMap, DepthMap, FlowField, Grid};
pub use metrics::{evaluate, MetricReport};
