//! Synthetic rigid scenes with exact flow and depth.
//!
//! The target camera sits at the origin. Each target pixel gets a true depth
//! from the scene geometry; its flow is the exact projection of that 3-D point
//! into the source camera, optionally with Gaussian noise. Depth is never noised.

use nalgebra::{Rotation3, Unit, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::camera::{CameraError, Intrinsics, RelativePose};
use crate::grid::{DepthMap, FlowField, Grid};
use crate::kv::{KvConfig, KvError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("no pixel of the scene projects into the source view")]
    EmptyScene,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Config(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneGeometry {
    /// Plane `z = depth`.
    FrontoParallel { depth: f64 },
    /// Plane through `(0, 0, depth)` whose normal is the optical axis rotated
    /// by `tilt_x_deg` about x and then `tilt_y_deg` about y.
    TiltedPlane {
        depth: f64,
        tilt_x_deg: f64,
        tilt_y_deg: f64,
    },
    /// One point per pixel with depth drawn uniformly from `[min_depth, max_depth]`.
    PointCloud { min_depth: f64, max_depth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// Standard deviation of the additive flow noise, in pixels.
    pub flow_std: f64,
    /// Rotation perturbation applied to the initial pose estimate, in degrees.
    pub perturb_rot_deg: f64,
    /// Translation perturbation as a fraction of the baseline length.
    pub perturb_trans_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub geometry: SceneGeometry,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// Target-to-source transform.
    pub pose: RelativePose,
    pub noise: NoiseSpec,
}

impl SyntheticScene {
    /// Fronto-parallel plane at 5 m seen from two cameras 1 m apart along x.
    pub fn plane(width: usize, height: usize) -> Self {
        let f = 100.0;
        Self {
            geometry: SceneGeometry::FrontoParallel { depth: 5.0 },
            width,
            height,
            intrinsics: Intrinsics {
                fx: f,
                fy: f,
                cx: (width as f64 - 1.0) / 2.0,
                cy: (height as f64 - 1.0) / 2.0,
            },
            pose: RelativePose::new(Rotation3::identity(), Vector3::new(-1.0, 0.0, 0.0)),
            noise: NoiseSpec::default(),
        }
    }

    /// Random well-conditioned scene for closed-loop tests: a point cloud or a
    /// tilted plane, a small random rotation and a mostly lateral baseline.
    pub fn random(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5CE7E);
        let f = rng.gen_range(0.8..1.6) * width as f64;
        let intrinsics = Intrinsics {
            fx: f,
            fy: f * rng.gen_range(0.95..1.05),
            cx: (width as f64 - 1.0) / 2.0 + rng.gen_range(-2.0..2.0),
            cy: (height as f64 - 1.0) / 2.0 + rng.gen_range(-2.0..2.0),
        };
        let geometry = if rng.gen_bool(0.5) {
            let near = rng.gen_range(3.0..8.0);
            SceneGeometry::PointCloud {
                min_depth: near,
                max_depth: near * rng.gen_range(2.0..6.0),
            }
        } else {
            SceneGeometry::TiltedPlane {
                depth: rng.gen_range(4.0..15.0),
                tilt_x_deg: rng.gen_range(-30.0..30.0),
                tilt_y_deg: rng.gen_range(-30.0..30.0),
            }
        };
        let omega = random_unit(&mut rng) * rng.gen_range(0.0..3f64.to_radians());
        let baseline = rng.gen_range(0.3..1.5);
        let dir = Vector3::new(
            if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        )
        .normalize();
        Self {
            geometry,
            width,
            height,
            intrinsics,
            pose: RelativePose::new(Rotation3::new(omega), dir * baseline),
            noise: NoiseSpec::default(),
        }
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::InvalidScene("image has no pixels".into()));
        }
        let n = &self.noise;
        if !(n.flow_std >= 0.0 && n.perturb_rot_deg >= 0.0 && n.perturb_trans_frac >= 0.0) {
            return Err(SynthError::InvalidScene("noise magnitudes must be >= 0".into()));
        }
        if !self.pose.is_finite() {
            return Err(SynthError::InvalidScene("pose is not finite".into()));
        }
        match self.geometry {
            SceneGeometry::FrontoParallel { depth } | SceneGeometry::TiltedPlane { depth, .. }
                if !(depth > 0.0 && depth.is_finite()) =>
            {
                Err(SynthError::InvalidScene(format!("plane depth {depth}")))
            }
            SceneGeometry::PointCloud {
                min_depth,
                max_depth,
            } if !(min_depth > 0.0 && max_depth >= min_depth && max_depth.is_finite()) => Err(
                SynthError::InvalidScene(format!("depth range [{min_depth}, {max_depth}]")),
            ),
            _ => Ok(()),
        }
    }

    /// True per-pixel depth of the scene.
    pub fn depth_map(&self, seed: u64) -> Result<DepthMap, SynthError> {
        self.validate()?;
        let k = &self.intrinsics;
        let depth = match self.geometry {
            SceneGeometry::FrontoParallel { depth } => {
                Grid::filled(self.width, self.height, depth)
            }
            SceneGeometry::TiltedPlane {
                depth,
                tilt_x_deg,
                tilt_y_deg,
            } => {
                let normal = Rotation3::from_axis_angle(&Vector3::y_axis(), tilt_y_deg.to_radians())
                    * Rotation3::from_axis_angle(&Vector3::x_axis(), tilt_x_deg.to_radians())
                    * Vector3::z();
                let offset = normal.z * depth;
                Grid::from_fn(self.width, self.height, |u, v| {
                    offset / normal.dot(&k.unproject(u as f64, v as f64))
                })
            }
            SceneGeometry::PointCloud {
                min_depth,
                max_depth,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                Grid::from_fn(self.width, self.height, |_, _| {
                    if max_depth > min_depth {
                        rng.gen_range(min_depth..max_depth)
                    } else {
                        min_depth
                    }
                })
            }
        };
        if let Some(bad) = depth.as_slice().iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(SynthError::InvalidScene(format!(
                "scene geometry yields non-positive depth {bad}"
            )));
        }
        Ok(depth)
    }

    pub fn to_config(&self) -> KvConfig {
        let mut cfg = KvConfig::new();
        match self.geometry {
            SceneGeometry::FrontoParallel { depth } => {
                cfg.set("kind", "plane");
                cfg.set("depth", depth);
            }
            SceneGeometry::TiltedPlane {
                depth,
                tilt_x_deg,
                tilt_y_deg,
            } => {
                cfg.set("kind", "tilted");
                cfg.set("depth", depth);
                cfg.set("tilt_x_deg", tilt_x_deg);
                cfg.set("tilt_y_deg", tilt_y_deg);
            }
            SceneGeometry::PointCloud {
                min_depth,
                max_depth,
            } => {
                cfg.set("kind", "cloud");
                cfg.set("depth_min", min_depth);
                cfg.set("depth_max", max_depth);
            }
        }
        cfg.set("width", self.width);
        cfg.set("height", self.height);
        let k = &self.intrinsics;
        cfg.set_list("intrinsics", &[k.fx, k.fy, k.cx, k.cy]);
        let c = self.pose.to_chart();
        cfg.set_list("rotation", &c[..3]);
        cfg.set_list("translation", &c[3..]);
        cfg.set("flow_noise_std", self.noise.flow_std);
        cfg.set("perturb_rot_deg", self.noise.perturb_rot_deg);
        cfg.set("perturb_trans_frac", self.noise.perturb_trans_frac);
        cfg
    }

    /// Parses a scene from its key-value form. Missing keys fall back to
    /// [`SyntheticScene::plane`] defaults for the given size.
    pub fn from_config(cfg: &KvConfig) -> Result<Self, SynthError> {
        cfg.check_keys(&[
            "kind",
            "depth",
            "tilt_x_deg",
            "tilt_y_deg",
            "depth_min",
            "depth_max",
            "width",
            "height",
            "intrinsics",
            "rotation",
            "translation",
            "flow_noise_std",
            "perturb_rot_deg",
            "perturb_trans_frac",
        ])?;
        let width = cfg.get_or("width", 64usize)?;
        let height = cfg.get_or("height", 48usize)?;
        let mut scene = Self::plane(width, height);
        let kind: String = cfg.get_or("kind", "plane".to_string())?;
        scene.geometry = match kind.as_str() {
            "plane" => SceneGeometry::FrontoParallel {
                depth: cfg.get_or("depth", 5.0)?,
            },
            "tilted" => SceneGeometry::TiltedPlane {
                depth: cfg.get_or("depth", 5.0)?,
                tilt_x_deg: cfg.get_or("tilt_x_deg", 0.0)?,
                tilt_y_deg: cfg.get_or("tilt_y_deg", 0.0)?,
            },
            "cloud" => SceneGeometry::PointCloud {
                min_depth: cfg.require("depth_min")?,
                max_depth: cfg.require("depth_max")?,
            },
            other => {
                return Err(KvError::BadValue {
                    key: "kind".into(),
                    value: other.into(),
                }
                .into())
            }
        };
        if let Some([fx, fy, cx, cy]) = cfg.get_array::<4>("intrinsics")? {
            scene.intrinsics = Intrinsics::new(fx, fy, cx, cy)?;
        }
        let mut chart = scene.pose.to_chart();
        if let Some(w) = cfg.get_array::<3>("rotation")? {
            chart[..3].copy_from_slice(&w);
        }
        if let Some(t) = cfg.get_array::<3>("translation")? {
            chart[3..].copy_from_slice(&t);
        }
        scene.pose = RelativePose::from_chart(&chart);
        scene.noise = NoiseSpec {
            flow_std: cfg.get_or("flow_noise_std", 0.0)?,
            perturb_rot_deg: cfg.get_or("perturb_rot_deg", 0.0)?,
            perturb_trans_frac: cfg.get_or("perturb_trans_frac", 0.0)?,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Slack on the source image border for rounding in the projection.
const EDGE: f64 = 1e-9;

/// Output of [`render`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub flow: FlowField,
    pub gt_depth: DepthMap,
    pub true_pose: RelativePose,
}

/// Renders flow and ground-truth depth for `scene`.
///
/// Pixels that land outside the source image or behind the source camera are
/// marked invalid in the flow; the depth map is complete.
pub fn render(scene: &SyntheticScene, seed: u64) -> Result<RenderedScene, SynthError> {
    let gt_depth = scene.depth_map(seed)?;
    let k = &scene.intrinsics;
    let (w, h) = (scene.width, scene.height);
    let max_u = w as f64 - 1.0;
    let max_v = h as f64 - 1.0;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, scene.noise.flow_std)
        .map_err(|e| SynthError::InvalidScene(e.to_string()))?;

    let mut flow = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let (uf, vf) = (u as f64, v as f64);
            let d = *gt_depth.get(u, v);
            let x_s = scene.pose.transform_point(&(k.unproject(uf, vf) * d));
            let projected = k
                .project(&x_s)
                .filter(|q| (-EDGE..=max_u + EDGE).contains(&q.x) && (-EDGE..=max_v + EDGE).contains(&q.y));
            match projected {
                Some(q) => {
                    let mut f = Vector2::new(q.x - uf, q.y - vf);
                    if scene.noise.flow_std > 0.0 {
                        f.x += noise.sample(&mut noise_rng);
                        f.y += noise.sample(&mut noise_rng);
                    }
                    flow.push(f);
                    valid.push(true);
                }
                None => {
                    flow.push(Vector2::zeros());
                    valid.push(false);
                }
            }
        }
    }
    if !valid.iter().any(|&b| b) {
        return Err(SynthError::EmptyScene);
    }
    let flow = FlowField::new(
        Grid::from_vec(w, h, flow).expect("shape"),
        Grid::from_vec(w, h, valid).expect("shape"),
    )
    .expect("shape");
    Ok(RenderedScene {
        flow,
        gt_depth,
        true_pose: scene.pose,
    })
}

fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotates `pose` by exactly `rot_deg` about a random axis and shifts its
/// translation by exactly `trans_frac · ‖t‖` in a random direction.
pub fn perturb_pose(pose: &RelativePose, rot_deg: f64, trans_frac: f64, seed: u64) -> RelativePose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Unit::new_unchecked(random_unit(&mut rng));
    let dir = random_unit(&mut rng);
    let delta = Rotation3::from_axis_angle(&axis, rot_deg.to_radians());
    let t = pose.translation();
    RelativePose::new(delta * pose.rotation(), t + dir * (trans_frac * t.norm()))
}
