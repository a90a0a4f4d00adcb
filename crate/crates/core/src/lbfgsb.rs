//! Limited-memory BFGS with simple bound constraints.
//!
//! Search directions come from the usual two-loop recursion over the last
//! `memory` curvature pairs. Bounds are handled by gradient projection:
//! variables sitting on a bound whose descent direction points outward are
//! frozen for the iteration, and the step length is capped at the first bound
//! hit along the direction. Step lengths satisfy the strong Wolfe conditions
//! when attainable inside the feasible segment; otherwise the largest feasible
//! step with sufficient decrease is taken.

use std::collections::VecDeque;

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LbfgsbError {
    #[error("objective or gradient is not finite at the {0} point")]
    NonFinite(&'static str),
    #[error("bounds for coordinate {0} are empty or not ordered")]
    BadBounds(usize),
    #[error("expected {expected} coordinates, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn validate(&self, n: usize) -> Result<(), LbfgsbError> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LbfgsbError::DimensionMismatch {
                expected: n,
                actual: self.lower.len().min(self.upper.len()),
            });
        }
        for i in 0..n {
            if !(self.lower[i] < self.upper[i]) {
                return Err(LbfgsbError::BadBounds(i));
            }
        }
        Ok(())
    }

    pub fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (0..x.len()).all(|i| x[i] >= self.lower[i] && x[i] <= self.upper[i])
    }

    /// Gradient with components that would leave the box zeroed.
    pub fn projected_gradient(&self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        let mut pg = g.clone();
        for i in 0..x.len() {
            if (x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0) {
                pg[i] = 0.0;
            }
        }
        pg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsbOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the infinity norm of the projected gradient drops below this.
    pub gradient_tolerance: f64,
    /// Stop when `(f_{k−w} − f_k) ≤ tol · max(|f_{k−w}|, |f_k|, 1)` with `w = stall_window`.
    pub objective_tolerance: f64,
    /// Number of iterations the relative improvement is measured over.
    pub stall_window: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
    /// Length of the very first trial step (before any curvature is known).
    pub initial_step: f64,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 100,
            gradient_tolerance: 1e-6,
            objective_tolerance: 1e-9,
            stall_window: 1,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    ObjectiveTolerance,
    MaxIterations,
    /// No step along the search direction decreased the objective.
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub objective: f64,
    pub projected_gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsbReport {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Entry 0 is the starting point, then one entry per accepted step.
    pub trace: Vec<IterationRecord>,
}

impl LbfgsbReport {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            Termination::GradientTolerance | Termination::ObjectiveTolerance
        )
    }
}

struct Evaluator<F> {
    f: F,
    count: usize,
}

impl<F> Evaluator<F>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    fn eval(&mut self, x: &DVector<f64>, what: &'static str) -> Result<(f64, DVector<f64>), LbfgsbError> {
        self.count += 1;
        let (v, g) = (self.f)(x);
        if g.len() != x.len() {
            return Err(LbfgsbError::DimensionMismatch {
                expected: x.len(),
                actual: g.len(),
            });
        }
        if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
            return Err(LbfgsbError::NonFinite(what));
        }
        Ok((v, g))
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` over the box `bounds` starting from `x0` (projected first).
///
/// `f` returns the value and gradient at a point.
pub fn minimize<F>(
    f: F,
    x0: &DVector<f64>,
    bounds: &Bounds,
    opts: &LbfgsbOptions,
) -> Result<LbfgsbReport, LbfgsbError>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    bounds.validate(n)?;
    let mut ev = Evaluator { f, count: 0 };
    let mut x = x0.clone();
    bounds.project(&mut x);
    let (mut fx, mut g) = ev.eval(&x, "initial")?;
    let mut pg = bounds.projected_gradient(&x, &g);
    let mut trace = vec![IterationRecord {
        objective: fx,
        projected_gradient_norm: inf_norm(&pg),
    }];
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;

    let termination = loop {
        if inf_norm(&pg) < opts.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }

        let mut d = two_loop(&pg, &history);
        freeze_outward(&x, &mut d, bounds);
        if d.dot(&g) >= 0.0 {
            history.clear();
            d = -pg.clone();
            freeze_outward(&x, &mut d, bounds);
        }
        let slope = d.dot(&g);
        if !(slope < 0.0) {
            break Termination::GradientTolerance;
        }
        let alpha_max = max_feasible_step(&x, &d, bounds);
        let alpha0 = if history.is_empty() {
            (opts.initial_step / d.norm()).min(alpha_max)
        } else {
            1.0f64.min(alpha_max)
        };

        let Some(step) = line_search(&mut ev, &x, fx, slope, &d, alpha0, alpha_max, opts)? else {
            break Termination::LineSearchFailed;
        };
        let mut x_new = &x + &d * step.alpha;
        bounds.project(&mut x_new);
        let s = &x_new - &x;
        let y = &step.g - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * y.norm_squared().max(f64::MIN_POSITIVE) {
            if history.len() == opts.memory.max(1) {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        x = x_new;
        fx = step.f;
        g = step.g;
        pg = bounds.projected_gradient(&x, &g);
        iterations += 1;
        trace.push(IterationRecord {
            objective: fx,
            projected_gradient_norm: inf_norm(&pg),
        });
        let window = opts.stall_window.max(1);
        if trace.len() > window {
            let f_old = trace[trace.len() - 1 - window].objective;
            if f_old - fx <= opts.objective_tolerance * f_old.abs().max(fx.abs()).max(1.0) {
                break Termination::ObjectiveTolerance;
            }
        }
    };

    Ok(LbfgsbReport {
        x,
        objective: fx,
        iterations,
        evaluations: ev.count,
        termination,
        trace,
    })
}

fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

fn freeze_outward(x: &DVector<f64>, d: &mut DVector<f64>, bounds: &Bounds) {
    for i in 0..x.len() {
        if (x[i] <= bounds.lower[i] && d[i] < 0.0) || (x[i] >= bounds.upper[i] && d[i] > 0.0) {
            d[i] = 0.0;
        }
    }
}

fn max_feasible_step(x: &DVector<f64>, d: &DVector<f64>, bounds: &Bounds) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..x.len() {
        if d[i] > 0.0 && bounds.upper[i].is_finite() {
            alpha = alpha.min((bounds.upper[i] - x[i]) / d[i]);
        } else if d[i] < 0.0 && bounds.lower[i].is_finite() {
            alpha = alpha.min((bounds.lower[i] - x[i]) / d[i]);
        }
    }
    alpha.max(0.0)
}

struct Step {
    alpha: f64,
    f: f64,
    g: DVector<f64>,
}

/// Strong-Wolfe bracketing and zoom restricted to `(0, alpha_max]`.
#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    ev: &mut Evaluator<F>,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    d: &DVector<f64>,
    alpha0: f64,
    alpha_max: f64,
    opts: &LbfgsbOptions,
) -> Result<Option<Step>, LbfgsbError>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    if !(alpha0 > 0.0) {
        return Ok(None);
    }
    let armijo = |alpha: f64, f: f64| f <= f0 + opts.c1 * alpha * slope0;
    let curvature = |slope: f64| slope.abs() <= -opts.c2 * slope0;
    let at = |alpha: f64, ev: &mut Evaluator<F>| -> Result<Step, LbfgsbError> {
        let (f, g) = ev.eval(&(x + d * alpha), "trial")?;
        Ok(Step { alpha, f, g })
    };

    // Best point seen that satisfies sufficient decrease and actually decreases f.
    let mut best: Option<Step> = None;
    let keep = |s: &Step, best: &mut Option<Step>| {
        if armijo(s.alpha, s.f) && s.f < f0 && best.as_ref().map_or(true, |b| s.f < b.f) {
            *best = Some(Step {
                alpha: s.alpha,
                f: s.f,
                g: s.g.clone(),
            });
        }
    };

    let mut prev = Step {
        alpha: 0.0,
        f: f0,
        g: DVector::zeros(0),
    };
    let mut prev_slope = slope0;
    let mut alpha = alpha0;
    let mut bracket = None;
    for i in 0..opts.max_line_search {
        let cur = at(alpha, ev)?;
        keep(&cur, &mut best);
        let slope = cur.g.dot(d);
        if !armijo(cur.alpha, cur.f) || (i > 0 && cur.f >= prev.f) {
            bracket = Some((prev, prev_slope, cur, slope));
            break;
        }
        if curvature(slope) {
            return Ok(Some(cur));
        }
        if slope >= 0.0 {
            bracket = Some((cur, slope, prev, prev_slope));
            break;
        }
        if alpha >= alpha_max {
            return Ok(Some(cur));
        }
        prev = cur;
        prev_slope = slope;
        alpha = (2.0 * alpha).min(alpha_max);
    }

    if let Some((mut lo, mut lo_slope, mut hi, _)) = bracket {
        for _ in 0..opts.max_line_search {
            let width = hi.alpha - lo.alpha;
            if width.abs() <= 1e-16 * lo.alpha.abs().max(hi.alpha.abs()).max(1e-300) {
                break;
            }
            // Quadratic through (lo, f_lo, slope_lo) and (hi, f_hi), safeguarded.
            let denom = 2.0 * (hi.f - lo.f - lo_slope * width);
            let mut trial = if denom > 0.0 {
                lo.alpha - lo_slope * width * width / denom
            } else {
                f64::NAN
            };
            let (a, b) = if lo.alpha < hi.alpha {
                (lo.alpha, hi.alpha)
            } else {
                (hi.alpha, lo.alpha)
            };
            let margin = 0.1 * (b - a);
            if !(trial > a + margin && trial < b - margin) {
                trial = 0.5 * (a + b);
            }
            let cur = at(trial, ev)?;
            keep(&cur, &mut best);
            let slope = cur.g.dot(d);
            if !armijo(cur.alpha, cur.f) || cur.f >= lo.f {
                hi = cur;
            } else {
                if curvature(slope) {
                    return Ok(Some(cur));
                }
                if slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
                lo_slope = slope;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &DVector<f64>) -> (f64, DVector<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DVector::from_vec(vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ]);
        (f, g)
    }

    #[test]
    fn rosenbrock_unbounded() {
        let opts = LbfgsbOptions {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            objective_tolerance: 0.0,
            ..Default::default()
        };
        let r = minimize(
            rosenbrock,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &Bounds::unbounded(2),
            &opts,
        )
        .unwrap();
        assert!(r.converged(), "{:?}", r.termination);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{}", r.x);
        for w in r.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }

    #[test]
    fn active_bound_is_respected() {
        // minimum of the unconstrained problem is (1, 1); restrict a <= 0.5
        let bounds = Bounds {
            lower: vec![-2.0, f64::NEG_INFINITY],
            upper: vec![0.5, f64::INFINITY],
        };
        let opts = LbfgsbOptions {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            objective_tolerance: 0.0,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &DVector::from_vec(vec![-1.2, 1.0]), &bounds, &opts).unwrap();
        assert!(bounds.contains(&r.x));
        assert!((r.x[0] - 0.5).abs() < 1e-7, "{}", r.x);
        assert!((r.x[1] - 0.25).abs() < 1e-6, "{}", r.x);
    }

    #[test]
    fn quadratic_in_few_iterations() {
        let scales = [1.0, 10.0, 100.0, 0.5];
        let f = |x: &DVector<f64>| {
            let v = (0..4).map(|i| scales[i] * (x[i] - i as f64).powi(2)).sum();
            let g = DVector::from_fn(4, |i, _| 2.0 * scales[i] * (x[i] - i as f64));
            (v, g)
        };
        let r = minimize(f, &DVector::zeros(4), &Bounds::unbounded(4), &LbfgsbOptions::default())
            .unwrap();
        assert!(r.converged());
        assert!(r.iterations < 20);
        for i in 0..4 {
            assert!((r.x[i] - i as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn start_outside_bounds_is_projected() {
        let bounds = Bounds {
            lower: vec![-1.0],
            upper: vec![1.0],
        };
        let f = |x: &DVector<f64>| (x[0] * x[0], DVector::from_vec(vec![2.0 * x[0]]));
        let r = minimize(f, &DVector::from_vec(vec![5.0]), &bounds, &LbfgsbOptions::default()).unwrap();
        assert!(r.x[0].abs() < 1e-6);
        assert!(r.trace[0].objective <= 1.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |x: &DVector<f64>| (f64::NAN, x.clone());
        let err = minimize(f, &DVector::zeros(2), &Bounds::unbounded(2), &LbfgsbOptions::default())
            .unwrap_err();
        assert_eq!(err, LbfgsbError::NonFinite("initial"));
    }

    #[test]
    fn bad_bounds_are_rejected() {
        let bounds = Bounds {
            lower: vec![1.0],
            upper: vec![1.0],
        };
        let f = |x: &DVector<f64>| (0.0, x.clone());
        assert_eq!(
            minimize(f, &DVector::zeros(1), &bounds, &LbfgsbOptions::default()).unwrap_err(),
            LbfgsbError::BadBounds(0)
        );
    }

    #[test]
    fn nonsmooth_abs_reaches_kink() {
        // f = |x| + |y|, minimum at the origin
        let f = |x: &DVector<f64>| {
            (
                x[0].abs() + 2.0 * x[1].abs(),
                DVector::from_vec(vec![x[0].signum(), 2.0 * x[1].signum()]),
            )
        };
        let r = minimize(
            f,
            &DVector::from_vec(vec![0.3, -0.2]),
            &Bounds::unbounded(2),
            &LbfgsbOptions::default(),
        )
        .unwrap();
        assert!(r.objective < 0.7);
        for w in r.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
    }
}
