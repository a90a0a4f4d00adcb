//! Relative pose refinement by maximizing the summed confidence map.
//!
//! The objective is `L(T) = Σ_{p∈S} C(p)` over pixels with positive depth.
//! It is maximized over the 6-vector chart `(ω, t)` by running bounded
//! L-BFGS on `−L`, with box bounds on the three rotation coordinates and a
//! free translation.
//!
//! `L` only depends on the direction of `t`: scaling the baseline scales all
//! depths and leaves every reprojection error unchanged. The refined
//! translation therefore keeps whatever length the optimizer ends at, which is
//! close to the initial length.

use std::f64::consts::PI;

use nalgebra::DVector;
use thiserror::Error;

use crate::camera::{Intrinsics, RelativePose};
use crate::geometry::{confidence_objective_and_gradient, ConfidenceParams};
use crate::grid::FlowField;
use crate::lbfgsb::{self, Bounds, LbfgsbError, LbfgsbOptions, Termination};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("objective or gradient is not finite; the flow or pose input is corrupt")]
    NonFiniteObjective,
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error("initial pose is not finite")]
    InvalidPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Box applied to each axis-angle coordinate.
    pub rotation_bounds: (f64, f64),
    pub objective_tolerance: f64,
    /// Length of the first trial step in chart units.
    pub initial_step: f64,
    /// Use central differences instead of the analytic gradient.
    pub finite_difference_gradient: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            rotation_bounds: (-PI, PI),
            objective_tolerance: 1e-9,
            initial_step: 1e-2,
            finite_difference_gradient: false,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.max_iterations < 1 {
            return Err(RefineError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        let (lo, hi) = self.rotation_bounds;
        if !(lo < hi) {
            return Err(RefineError::InvalidConfig(format!(
                "rotation bounds [{lo}, {hi}] are not ordered"
            )));
        }
        if !(self.gradient_tolerance >= 0.0 && self.objective_tolerance >= 0.0) {
            return Err(RefineError::InvalidConfig("tolerances must be >= 0".into()));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(RefineError::InvalidConfig("initial_step must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    /// Summed confidence at the accepted iterate.
    pub objective: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub refined_pose: RelativePose,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
}

/// `Σ_{p∈S} C(p)`: the sum of the proposal's confidence map.
pub fn refinement_objective(
    flow: &FlowField,
    target: &Intrinsics,
    pose: &RelativePose,
    source: &Intrinsics,
    params: &ConfidenceParams,
) -> f64 {
    confidence_objective_and_gradient(flow, target, pose, source, params).value
}

const FD_STEP: f64 = 1e-6;

/// Iterations over which the relative objective improvement is measured.
/// Near the optimum single steps creep along kinks and gain very little each.
const STALL_WINDOW: usize = 10;

/// Warm restarts of the quasi-Newton run after it stalls.
const MAX_RESTARTS: usize = 5;

fn finite_difference_gradient(
    flow: &FlowField,
    target: &Intrinsics,
    chart: &[f64; 6],
    source: &Intrinsics,
    params: &ConfidenceParams,
) -> [f64; 6] {
    let mut g = [0.0; 6];
    for i in 0..6 {
        let mut plus = *chart;
        let mut minus = *chart;
        plus[i] += FD_STEP;
        minus[i] -= FD_STEP;
        let fp = refinement_objective(flow, target, &RelativePose::from_chart(&plus), source, params);
        let fm = refinement_objective(flow, target, &RelativePose::from_chart(&minus), source, params);
        g[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    g
}

/// Refines `initial` by maximizing the summed confidence.
///
/// Deterministic for identical inputs. The returned pose is never worse than
/// the initial one.
pub fn refine_pose(
    flow: &FlowField,
    target: &Intrinsics,
    initial: &RelativePose,
    source: &Intrinsics,
    params: &ConfidenceParams,
    cfg: &RefinementConfig,
) -> Result<RefinementResult, RefineError> {
    cfg.validate()?;
    if !initial.is_finite() {
        return Err(RefineError::InvalidPose);
    }
    let (lo, hi) = cfg.rotation_bounds;
    let bounds = Bounds {
        lower: vec![lo, lo, lo, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
        upper: vec![hi, hi, hi, f64::INFINITY, f64::INFINITY, f64::INFINITY],
    };
    let x0 = DVector::from_row_slice(&initial.to_chart());
    let initial_objective = refinement_objective(flow, target, initial, source, params);
    if !initial_objective.is_finite() {
        return Err(RefineError::NonFiniteObjective);
    }

    let mut negated = |x: &DVector<f64>| {
        let chart: [f64; 6] = x.as_slice().try_into().expect("6-vector chart");
        let pose = RelativePose::from_chart(&chart);
        let eval = confidence_objective_and_gradient(flow, target, &pose, source, params);
        let g = if cfg.finite_difference_gradient {
            finite_difference_gradient(flow, target, &chart, source, params)
        } else {
            eval.gradient
        };
        (-eval.value, -DVector::from_row_slice(&g))
    };
    let opts = LbfgsbOptions {
        max_iterations: cfg.max_iterations,
        gradient_tolerance: cfg.gradient_tolerance,
        objective_tolerance: cfg.objective_tolerance,
        initial_step: cfg.initial_step,
        stall_window: STALL_WINDOW,
        ..LbfgsbOptions::default()
    };
    // The objective has kinks wherever a residual crosses zero, where the
    // quasi-Newton model can stall; restart from the stalled point with a
    // fresh memory until a restart stops paying off.
    let mut x = x0;
    let mut iterations = 0;
    let mut converged = false;
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut objective = f64::NEG_INFINITY;
    for restart in 0..=MAX_RESTARTS {
        let remaining = cfg.max_iterations.saturating_sub(iterations);
        if restart > 0 && remaining == 0 {
            break;
        }
        let opts = LbfgsbOptions {
            max_iterations: remaining.max(1),
            ..opts.clone()
        };
        let report = lbfgsb::minimize(&mut negated, &x, &bounds, &opts).map_err(|e| match e {
            LbfgsbError::NonFinite(_) => RefineError::NonFiniteObjective,
            other => RefineError::InvalidConfig(other.to_string()),
        })?;
        log::debug!(
            "pose refinement run {restart}: {:?} after {} iterations ({} evaluations)",
            report.termination,
            report.iterations,
            report.evaluations
        );
        let skip = usize::from(!trace.is_empty());
        trace.extend(report.trace.iter().skip(skip).map(|r| TraceEntry {
            objective: -r.objective,
            gradient_norm: r.projected_gradient_norm,
        }));
        iterations += report.iterations;
        let gain = -report.objective - objective;
        let stop_now = report.termination == Termination::GradientTolerance || report.iterations == 0;
        objective = -report.objective;
        converged = report.termination != Termination::MaxIterations;
        x = report.x;
        if stop_now || gain <= cfg.objective_tolerance * objective.abs().max(1.0)
        {
            break;
        }
    }

    let chart: [f64; 6] = x.as_slice().try_into().expect("6-vector chart");
    let candidate = RelativePose::from_chart(&chart);
    let candidate_objective = objective;
    let (refined_pose, final_objective) = if candidate_objective >= initial_objective {
        (candidate, candidate_objective)
    } else {
        (*initial, initial_objective)
    };
    Ok(RefinementResult {
        refined_pose,
        initial_objective,
        final_objective,
        iterations,
        converged,
        trace,
    })
}
