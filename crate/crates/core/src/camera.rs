//! Pinhole intrinsics and rigid relative poses.
//!
//! A [`RelativePose`] maps points expressed in the target camera frame into the
//! source camera frame, `X_s = R X_t + t`. Together with the source intrinsics it
//! forms the source camera matrix `K_s [R | t]`, while the target camera is
//! `K [I | 0]`.
//!
//! For optimization the pose is exposed through a 6-vector chart
//! `(ω, t)` where `ω` is the axis-angle vector of `R`.

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector2, Vector3};
use thiserror::Error;

/// Orthonormality tolerance accepted by [`RelativePose::from_matrix`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: fx={fx}, fy={fy}, cx={cx}, cy={cy}")]
    InvalidIntrinsics { fx: f64, fy: f64, cx: f64, cy: f64 },
    #[error("rotation is not orthonormal (deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("rotation has determinant {0}, expected +1")]
    NotProper(f64),
    #[error("pose contains non-finite values")]
    NonFinite,
}

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, CameraError> {
        let ok = fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite();
        if !ok || fx <= 0.0 || fy <= 0.0 {
            return Err(CameraError::InvalidIntrinsics { fx, fy, cx, cy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Identity intrinsics (unit focal length, principal point at the origin).
    pub fn identity() -> Self {
        Self {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Back-projects pixel `(u, v)` to the ray `K⁻¹ [u, v, 1]ᵀ` (unit depth).
    #[inline]
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Applies `K` to a camera-frame vector without homogenizing.
    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.fx * x.x + self.cx * x.z,
            self.fy * x.y + self.cy * x.z,
            x.z,
        )
    }

    /// Projects a camera-frame point to pixel coordinates. Returns `None` for
    /// points at or behind the camera plane.
    pub fn project(&self, x: &Vector3<f64>) -> Option<Vector2<f64>> {
        if x.z <= 0.0 || !x.z.is_finite() {
            return None;
        }
        Some(Vector2::new(
            self.fx * x.x / x.z + self.cx,
            self.fy * x.y / x.z + self.cy,
        ))
    }
}

/// Rigid transform from the target camera frame to the source camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl RelativePose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw rotation matrix, checking `RᵀR = I` and `det R = 1`.
    pub fn from_matrix(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, CameraError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(CameraError::NonFinite);
        }
        let deviation = orthonormality_error(&rotation);
        if deviation > ROTATION_TOLERANCE {
            return Err(CameraError::NotOrthonormal { deviation });
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(CameraError::NotProper(det));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    /// Pose from the 6-vector chart `[ωx, ωy, ωz, tx, ty, tz]`.
    pub fn from_chart(x: &[f64; 6]) -> Self {
        let omega = Vector3::new(x[0], x[1], x[2]);
        Self {
            rotation: so3_exp(&omega),
            translation: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_chart(&self) -> [f64; 6] {
        let w = so3_log(&self.rotation);
        let t = self.translation;
        [w.x, w.y, w.z, t.x, t.y, t.z]
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn with_translation(&self, translation: Vector3<f64>) -> Self {
        Self {
            rotation: self.rotation,
            translation,
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self ∘ other`: first apply `other`, then `self`.
    pub fn compose(&self, other: &RelativePose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Source camera matrix `M' = K_s [R | t]`.
    pub fn camera_matrix(&self, source: &Intrinsics) -> Matrix3x4<f64> {
        let k = source.matrix();
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        k * rt
    }

    /// Geodesic angle between the two rotations, in radians.
    pub fn rotation_distance(&self, other: &RelativePose) -> f64 {
        rotation_angle(&(self.rotation.inverse() * other.rotation))
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .matrix()
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
    }
}

/// Maximum absolute entry of `RᵀR − I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Angle of a rotation in `[0, π]`, computed from both the trace and the
/// skew part so it stays accurate at small angles.
pub fn rotation_angle(r: &Rotation3<f64>) -> f64 {
    let m = r.matrix();
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin2 = s.norm(); // 2 sin θ
    let cos2 = m.trace() - 1.0; // 2 cos θ
    sin2.atan2(cos2)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map of so(3) (Rodrigues' formula).
pub fn so3_exp(omega: &Vector3<f64>) -> Rotation3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let (a, b) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation3::from_matrix_unchecked(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map of SO(3); returns `ω` with `‖ω‖ ∈ [0, π]`.
pub fn so3_log(r: &Rotation3<f64>) -> Vector3<f64> {
    let m = r.matrix();
    let s = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let theta = rotation_angle(r);
    if theta < 1e-4 {
        // θ / (2 sin θ) ≈ 1/2 + θ²/12
        return s * (0.5 + theta * theta / 12.0);
    }
    if theta < 3.0 {
        return s * (theta / (2.0 * theta.sin()));
    }
    // Near π the skew part vanishes; recover the axis from the symmetric part
    // R + Rᵀ = 2 cos θ I + 2 (1 − cos θ) n nᵀ.
    let c = theta.cos();
    let b = (m + m.transpose()) * 0.5 - Matrix3::identity() * c;
    let scale = 1.0 - c;
    let mut col = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(col, col)] {
            col = i;
        }
    }
    let mut axis = Vector3::new(b[(0, col)], b[(1, col)], b[(2, col)]) / scale;
    axis /= axis.norm();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `exp(ω + δ) ≈ exp(ω) exp(J_r(ω) δ)`.
pub fn so3_right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}
