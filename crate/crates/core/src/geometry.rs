//! Flow-to-depth layer.
//!
//! For a target pixel `p` and its flow correspondence `p'` in the source view,
//! the depth `d` of the 3-D point `d K⁻¹ p` is found by minimizing the
//! reprojection error
//!
//! ```text
//! ε(d) = ‖ φ(d a + b) − p' ‖,   a = K_s R K⁻¹ p,   b = K_s t,   φ(x) = x / x₃
//! ```
//!
//! As `d` varies, `φ(d a + b)` sweeps the epipolar line `l = a × b`. The
//! minimizer is the depth whose projection is the foot of the perpendicular
//! from `p'` onto `l`, and the minimum error is the point-to-line distance.
//! With `q` that foot point the depth has the closed form
//!
//! ```text
//! d* = mᵀn / mᵀm,   m = a₁:₂ − a₃ q,   n = b₃ q − b₁:₂
//! ```
//!
//! which is the same ratio evaluated at `p'` itself whenever the
//! correspondence already lies on its epipolar line (noiseless flow).
//!
//! Confidence is `exp(−ε/σ)` on pixels with positive depth and zero elsewhere.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{so3_log, so3_right_jacobian, Intrinsics, RelativePose};
use crate::grid::{ConfidenceMap, DepthMap, FlowField, Grid};

/// Below this `mᵀm` the depth along the ray is numerically undetermined.
pub const DEGENERATE_TOLERANCE: f64 = 1e-12;

/// Relative tolerance on `‖l₁:₂‖² / (‖a‖² ‖b‖²)`: the epipolar line through the
/// pixel is undefined when the ray and the baseline are (nearly) parallel.
const LINE_TOLERANCE: f64 = 1e-24;

/// Residuals below this many pixels are treated as exactly zero when
/// differentiating, which selects the zero subgradient at the cusp of `|ε|`.
pub const RESIDUAL_ZERO: f64 = 1e-8;

pub const DEFAULT_SIGMA: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate ray: no parallax between the two views at this pixel")]
    DegenerateRay,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("confidence sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceParams {
    sigma: f64,
}

impl ConfidenceParams {
    pub fn new(sigma: f64) -> Result<Self, GeometryError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(GeometryError::InvalidSigma(sigma));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    #[inline]
    pub fn confidence(&self, residual: f64) -> f64 {
        (-residual / self.sigma).exp()
    }
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// Optimal depth along a target ray and the reprojection error it leaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    /// Depth in meters; may be negative (the caller masks those).
    pub depth: f64,
    /// Reprojection error in source pixels, always `>= 0`.
    pub residual: f64,
}

/// Reprojection error `ε(d)` for an arbitrary depth hypothesis.
pub fn reprojection_error(
    depth: f64,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    p_prime: &Vector2<f64>,
) -> f64 {
    let x = a * depth + b;
    let proj = Vector2::new(x.x / x.z, x.y / x.z);
    (proj - p_prime).norm()
}

/// Solves for the optimal depth given the ray image `a` and the source
/// center image `b` (see the module docs).
#[inline]
pub fn solve_depth(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    p_prime: &Vector2<f64>,
) -> Result<Triangulation, GeometryError> {
    let l = a.cross(b);
    let r2 = l.x * l.x + l.y * l.y;
    if !(r2 > LINE_TOLERANCE * a.norm_squared() * b.norm_squared()) || !r2.is_finite() {
        return Err(GeometryError::DegenerateRay);
    }
    let s = l.x * p_prime.x + l.y * p_prime.y + l.z;
    let q = Vector2::new(p_prime.x - s * l.x / r2, p_prime.y - s * l.y / r2);
    let m = Vector2::new(a.x - a.z * q.x, a.y - a.z * q.y);
    let n = Vector2::new(b.z * q.x - b.x, b.z * q.y - b.y);
    let mm = m.dot(&m);
    if !(mm >= DEGENERATE_TOLERANCE) {
        return Err(GeometryError::DegenerateRay);
    }
    Ok(Triangulation {
        depth: m.dot(&n) / mm,
        residual: s.abs() / r2.sqrt(),
    })
}

/// Closed-form triangulation of one correspondence `p ↔ p'`.
///
/// `m_prime` is the 3×4 source camera matrix, `k` the target intrinsics.
pub fn triangulate_pixel(
    p: &Vector2<f64>,
    p_prime: &Vector2<f64>,
    k: &Intrinsics,
    m_prime: &Matrix3x4<f64>,
) -> Result<Triangulation, GeometryError> {
    let ray = k.unproject(p.x, p.y);
    let a = m_prime.fixed_view::<3, 3>(0, 0) * ray;
    let b = m_prime.column(3).into_owned();
    solve_depth(&a, &b, p_prime)
}

/// Depth proposal `D_{t,s}` with its confidence map `C_{t,s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProposal {
    /// Raw optimal depth per pixel; NaN where the flow is invalid or the ray is degenerate.
    pub depth: DepthMap,
    /// `exp(−ε/σ)` where `positive_mask` holds, else 0.
    pub confidence: ConfidenceMap,
    /// Valid flow, non-degenerate ray and `d > 0`.
    pub positive_mask: Grid<bool>,
    /// Reprojection error at the optimal depth; NaN where undefined.
    pub residual: Grid<f64>,
}

impl DepthProposal {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    /// Depth map with masked pixels set to 0.
    pub fn masked_depth(&self) -> DepthMap {
        let data = self
            .depth
            .as_slice()
            .iter()
            .zip(self.positive_mask.as_slice())
            .map(|(&d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Grid::from_vec(self.width(), self.height(), data).expect("shape preserved")
    }

    pub fn confidence_sum(&self) -> f64 {
        self.confidence.as_slice().iter().sum()
    }
}

/// Per-frame constants shared by every pixel.
struct RayProjector {
    /// `K_s R K⁻¹`
    ray_to_source: Matrix3<f64>,
    /// `K_s t`
    center: Vector3<f64>,
}

impl RayProjector {
    fn new(target: &Intrinsics, pose: &RelativePose, source: &Intrinsics) -> Self {
        Self {
            ray_to_source: source.matrix() * pose.rotation_matrix() * target.inverse_matrix(),
            center: source.apply(pose.translation()),
        }
    }

    #[inline]
    fn a(&self, u: f64, v: f64) -> Vector3<f64> {
        self.ray_to_source * Vector3::new(u, v, 1.0)
    }
}

fn check_flow(flow: &FlowField) -> Result<(), GeometryError> {
    if flow.is_empty() {
        return Err(GeometryError::DimensionMismatch(format!(
            "flow field is {}x{}",
            flow.width(),
            flow.height()
        )));
    }
    Ok(())
}

/// Checks a flow field against the expected target frame size.
pub fn check_frame_size(flow: &FlowField, width: usize, height: usize) -> Result<(), GeometryError> {
    if flow.width() != width || flow.height() != height {
        return Err(GeometryError::DimensionMismatch(format!(
            "flow is {}x{} but the target frame is {}x{}",
            flow.width(),
            flow.height(),
            width,
            height
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct PixelOutcome {
    depth: f64,
    residual: f64,
    positive: bool,
}

const INVALID_PIXEL: PixelOutcome = PixelOutcome {
    depth: f64::NAN,
    residual: f64::NAN,
    positive: false,
};

/// Triangulates every pixel of `flow` and builds the confidence map.
pub fn flow_to_depth(
    flow: &FlowField,
    target: &Intrinsics,
    pose: &RelativePose,
    source: &Intrinsics,
    params: &ConfidenceParams,
) -> Result<DepthProposal, GeometryError> {
    check_flow(flow)?;
    let width = flow.width();
    let height = flow.height();
    let proj = RayProjector::new(target, pose, source);

    let outcomes: Vec<PixelOutcome> = (0..flow.len())
        .into_par_iter()
        .map(|i| {
            let Some(f) = flow.at(i) else {
                return INVALID_PIXEL;
            };
            let u = (i % width) as f64;
            let v = (i / width) as f64;
            let p_prime = Vector2::new(u + f.x, v + f.y);
            match solve_depth(&proj.a(u, v), &proj.center, &p_prime) {
                Ok(tri) => PixelOutcome {
                    depth: tri.depth,
                    residual: tri.residual,
                    positive: tri.depth > 0.0 && tri.depth.is_finite(),
                },
                Err(_) => INVALID_PIXEL,
            }
        })
        .collect();

    let depth = outcomes.iter().map(|o| o.depth).collect();
    let residual = outcomes.iter().map(|o| o.residual).collect();
    let positive: Vec<bool> = outcomes.iter().map(|o| o.positive).collect();
    let confidence = outcomes
        .iter()
        .map(|o| {
            if o.positive {
                params.confidence(o.residual)
            } else {
                0.0
            }
        })
        .collect();

    Ok(DepthProposal {
        depth: Grid::from_vec(width, height, depth).expect("shape"),
        confidence: Grid::from_vec(width, height, confidence).expect("shape"),
        positive_mask: Grid::from_vec(width, height, positive).expect("shape"),
        residual: Grid::from_vec(width, height, residual).expect("shape"),
    })
}

/// Summed confidence over the positive-depth set and its gradient with
/// respect to the pose chart `(ω, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveAndGradient {
    pub value: f64,
    pub gradient: [f64; 6],
    /// Number of pixels in the positive-depth set.
    pub support: usize,
}

/// Evaluates `Σ_{p∈S} C(p)` and its analytic gradient.
///
/// The set `S` is frozen at `pose`. Each pixel's confidence depends on the
/// pose only through the point-to-epipolar-line distance
/// `ε = |lᵀ p̃'| / ‖l₁:₂‖` with `l = (K_s R K⁻¹ p) × (K_s t)`, which is what
/// gets differentiated. Rows are reduced in order, so the result does not
/// depend on the thread count.
pub fn confidence_objective_and_gradient(
    flow: &FlowField,
    target: &Intrinsics,
    pose: &RelativePose,
    source: &Intrinsics,
    params: &ConfidenceParams,
) -> ObjectiveAndGradient {
    let width = flow.width();
    let height = flow.height();
    if flow.is_empty() {
        return ObjectiveAndGradient {
            value: 0.0,
            gradient: [0.0; 6],
            support: 0,
        };
    }
    let proj = RayProjector::new(target, pose, source);
    let k_inv = target.inverse_matrix();
    let ks_t = source.matrix().transpose();
    let rt_ks_t = pose.rotation_matrix().transpose() * ks_t;
    let jr_t = so3_right_jacobian(&so3_log(pose.rotation())).transpose();
    let sigma = params.sigma();
    let b = proj.center;

    let rows: Vec<(f64, [f64; 6], usize)> = (0..height)
        .into_par_iter()
        .map(|v| {
            let mut value = 0.0;
            let mut g_omega = Vector3::zeros();
            let mut g_t = Vector3::zeros();
            let mut support = 0usize;
            for u in 0..width {
                let i = v * width + u;
                let Some(f) = flow.at(i) else { continue };
                let (uf, vf) = (u as f64, v as f64);
                let p_prime = Vector2::new(uf + f.x, vf + f.y);
                let a = proj.a(uf, vf);
                let tri = match solve_depth(&a, &b, &p_prime) {
                    Ok(t) if t.depth > 0.0 && t.depth.is_finite() => t,
                    _ => continue,
                };
                support += 1;
                let c = params.confidence(tri.residual);
                value += c;
                if tri.residual < RESIDUAL_ZERO {
                    continue;
                }
                let l = a.cross(&b);
                let r2 = l.x * l.x + l.y * l.y;
                let r = r2.sqrt();
                let s = l.x * p_prime.x + l.y * p_prime.y + l.z;
                let p_h = Vector3::new(p_prime.x, p_prime.y, 1.0);
                // dε/dl
                let g_l = p_h * (s.signum() / r) - Vector3::new(l.x, l.y, 0.0) * (s.abs() / (r2 * r));
                // dC/dl
                let gc_l = g_l * (-c / sigma);
                let g_a = b.cross(&gc_l);
                let g_b = gc_l.cross(&a);
                g_t += ks_t * g_b;
                let w = k_inv * Vector3::new(uf, vf, 1.0);
                g_omega += w.cross(&(rt_ks_t * g_a));
            }
            let g_omega = jr_t * g_omega;
            (
                value,
                [g_omega.x, g_omega.y, g_omega.z, g_t.x, g_t.y, g_t.z],
                support,
            )
        })
        .collect();

    let mut out = ObjectiveAndGradient {
        value: 0.0,
        gradient: [0.0; 6],
        support: 0,
    };
    for (value, g, support) in rows {
        out.value += value;
        for (acc, gi) in out.gradient.iter_mut().zip(g) {
            *acc += gi;
        }
        out.support += support;
    }
    out
}

/// Gradient of the summed confidence with respect to the pose chart `(ω, t)`.
pub fn confidence_gradient_wrt_pose(
    flow: &FlowField,
    target: &Intrinsics,
    pose: &RelativePose,
    source: &Intrinsics,
    params: &ConfidenceParams,
) -> [f64; 6] {
    confidence_objective_and_gradient(flow, target, pose, source, params).gradient
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;

    fn camera_matrix(r: Matrix3<f64>, t: Vector3<f64>) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    #[test]
    fn stereo_hand_example() {
        let m = camera_matrix(Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0));
        let tri = triangulate_pixel(
            &Vector2::new(0.0, 0.0),
            &Vector2::new(-0.5, 0.0),
            &Intrinsics::identity(),
            &m,
        )
        .unwrap();
        assert_relative_eq!(tri.depth, 2.0, epsilon = 1e-15);
        assert_eq!(tri.residual, 0.0);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let m = camera_matrix(Matrix3::identity(), Vector3::zeros());
        for p in [Vector2::new(0.0, 0.0), Vector2::new(0.3, -2.0)] {
            assert_eq!(
                triangulate_pixel(&p, &p, &Intrinsics::identity(), &m),
                Err(GeometryError::DegenerateRay)
            );
        }
    }

    #[test]
    fn pixel_at_epipole_is_degenerate() {
        // Forward motion: the epipole is the principal point.
        let k = Intrinsics::new(100.0, 100.0, 50.0, 40.0).unwrap();
        let pose = RelativePose::new(Rotation3::identity(), Vector3::new(0.0, 0.0, -1.0));
        let m = pose.camera_matrix(&k);
        let p = Vector2::new(50.0, 40.0);
        assert_eq!(
            triangulate_pixel(&p, &p, &k, &m),
            Err(GeometryError::DegenerateRay)
        );
    }

    #[test]
    fn reversed_translation_negates_depth() {
        let m = camera_matrix(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0));
        let tri = triangulate_pixel(
            &Vector2::new(0.0, 0.0),
            &Vector2::new(-0.5, 0.0),
            &Intrinsics::identity(),
            &m,
        )
        .unwrap();
        assert_relative_eq!(tri.depth, -2.0, epsilon = 1e-15);
    }

    #[test]
    fn residual_matches_reprojection_error_at_optimum() {
        let k = Intrinsics::new(300.0, 310.0, 160.0, 120.0).unwrap();
        let pose = RelativePose::from_chart(&[0.02, -0.05, 0.01, -0.8, 0.1, 0.3]);
        let m = pose.camera_matrix(&k);
        let p = Vector2::new(40.0, 200.0);
        let p_prime = Vector2::new(12.5, 210.25);
        let tri = triangulate_pixel(&p, &p_prime, &k, &m).unwrap();
        let a = m.fixed_view::<3, 3>(0, 0) * k.unproject(p.x, p.y);
        let b = m.column(3).into_owned();
        assert_relative_eq!(
            tri.residual,
            reprojection_error(tri.depth, &a, &b, &p_prime),
            max_relative = 1e-9
        );
    }

    #[test]
    fn confidence_at_sigma() {
        let params = ConfidenceParams::default();
        assert_relative_eq!(params.confidence(20.0), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(params.confidence(20.0), 0.367879, epsilon = 1e-6);
        assert_eq!(params.confidence(0.0), 1.0);
        assert!(ConfidenceParams::new(0.0).is_err());
        assert!(ConfidenceParams::new(f64::INFINITY).is_err());
    }

    #[test]
    fn empty_flow_is_rejected() {
        let flow = FlowField::dense(Grid::from_vec(0, 0, vec![]).unwrap());
        let k = Intrinsics::identity();
        let err = flow_to_depth(
            &flow,
            &k,
            &RelativePose::identity(),
            &k,
            &ConfidenceParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GeometryError::DimensionMismatch(_)));
        assert!(check_frame_size(&flow, 2, 2).is_err());
    }

    #[test]
    fn invalid_flow_pixels_are_masked() {
        let k = Intrinsics::new(100.0, 100.0, 1.0, 1.0).unwrap();
        let pose = RelativePose::new(Rotation3::identity(), Vector3::new(-1.0, 0.0, 0.0));
        let flow = Grid::filled(3, 3, Vector2::new(-20.0, 0.0));
        let mut valid = Grid::filled(3, 3, true);
        *valid.get_mut(1, 1) = false;
        let flow = FlowField::new(flow, valid).unwrap();
        let prop = flow_to_depth(&flow, &k, &pose, &k, &ConfidenceParams::default()).unwrap();
        assert!(!prop.positive_mask.get(1, 1));
        assert_eq!(*prop.confidence.get(1, 1), 0.0);
        assert!(prop.depth.get(1, 1).is_nan());
        assert_relative_eq!(*prop.depth.get(0, 0), 5.0, epsilon = 1e-12);
        assert_eq!(prop.masked_depth().valid_count(), 8);
    }

    proptest! {
        // d* is a local minimizer of the reprojection error for arbitrary
        // (not necessarily consistent) correspondences.
        #[test]
        fn optimal_depth_is_local_minimum(
            w in prop::array::uniform3(-0.3f64..0.3),
            t in prop::array::uniform3(-2.0f64..2.0),
            p in prop::array::uniform2(0.0f64..640.0),
            p_prime in prop::array::uniform2(0.0f64..640.0),
            f in 200.0f64..800.0,
        ) {
            let k = Intrinsics::new(f, f * 1.05, 320.0, 240.0).unwrap();
            let pose = RelativePose::from_chart(&[w[0], w[1], w[2], t[0], t[1], t[2]]);
            prop_assume!(pose.translation().norm() > 0.05);
            let m = pose.camera_matrix(&k);
            let p = Vector2::new(p[0], p[1]);
            let pp = Vector2::new(p_prime[0], p_prime[1]);
            let Ok(tri) = triangulate_pixel(&p, &pp, &k, &m) else { return Ok(()); };
            let a = m.fixed_view::<3, 3>(0, 0) * k.unproject(p.x, p.y);
            let b = m.column(3).into_owned();
            let e0 = reprojection_error(tri.depth, &a, &b, &pp);
            prop_assume!(e0.is_finite());
            for rel in [1e-3, 1e-2, 1e-1] {
                let delta = rel * tri.depth.abs();
                for d in [tri.depth + delta, tri.depth - delta] {
                    let e = reprojection_error(d, &a, &b, &pp);
                    if e.is_finite() {
                        prop_assert!(e0 <= e + 1e-9 * (1.0 + e), "{} > {} at {}", e0, e, d);
                    }
                }
            }
        }
    }
}
