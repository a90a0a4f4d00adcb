//! File formats: Middlebury flow, depth maps, pose lists, intrinsics and
//! color-mapped previews.
//!
//! All binary values are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{orthonormality_error, Intrinsics, RelativePose};
use crate::fusion::{FrameSequence, FusionError};
use crate::grid::{ConfidenceMap, DepthMap, FlowField, Grid};

pub const FLOW_MAGIC: f32 = 202021.25;
/// Largest accepted width or height.
pub const MAX_DIMENSION: usize = 32768;
/// Flow components with a larger magnitude mark an unknown vector.
pub const FLOW_UNKNOWN_THRESHOLD: f32 = 1e9;
/// Written in place of unknown flow vectors.
pub const FLOW_UNKNOWN_VALUE: f32 = 1e10;
pub const FLOAT_MAP_MAGIC: &[u8; 8] = b"FDEPTHv1";
/// Meters per count in 16-bit depth images.
pub const PNG_DEPTH_SCALE: f64 = 256.0;
/// Above this rotation error a pose line is rejected.
pub const ROTATION_REJECT: f64 = 1e-3;
/// Above this rotation error a pose line is reorthonormalized.
pub const ROTATION_REPAIR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("{0}: bad magic number")]
    BadMagic(PathBuf),
    #[error("{0}: file is shorter than its header promises")]
    TruncatedFile(PathBuf),
    #[error("{path}: dimensions {width}x{height} exceed {MAX_DIMENSION} per side")]
    DimensionOverflow { path: PathBuf, width: i64, height: i64 },
    #[error("{path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{0}: unknown depth file extension (expected .png or .fdm)")]
    UnknownExtension(PathBuf),
    #[error("{path}: line {line}: expected 12 numbers")]
    BadLine { path: PathBuf, line: usize },
    #[error("{path}: line {line}: rotation is not rigid (orthonormality error {error:.3e})")]
    NonRigidRotation { path: PathBuf, line: usize, error: f64 },
    #[error("{path}: {reason}")]
    BadIntrinsics { path: PathBuf, reason: String },
    #[error("{path}: image error: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("frame sequence: {0}")]
    Sequence(#[from] FusionError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |error| IoError::Io {
        path: path.to_path_buf(),
        error,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn check_dims(path: &Path, width: i64, height: i64) -> Result<(usize, usize), IoError> {
    if width < 0 || height < 0 {
        return Err(IoError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("negative dimensions {width}x{height}"),
        });
    }
    if width as usize > MAX_DIMENSION || height as usize > MAX_DIMENSION {
        return Err(IoError::DimensionOverflow {
            path: path.to_path_buf(),
            width,
            height,
        });
    }
    Ok((width as usize, height as usize))
}

/// Checks that `bytes` holds exactly `header + payload` bytes.
fn check_length(path: &Path, bytes: &[u8], expected: usize) -> Result<(), IoError> {
    if bytes.len() < expected {
        return Err(IoError::TruncatedFile(path.to_path_buf()));
    }
    if bytes.len() > expected {
        return Err(IoError::BadHeader {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after the data", bytes.len() - expected),
        });
    }
    Ok(())
}

pub fn decode_flow(path: &Path, bytes: &[u8]) -> Result<FlowField, IoError> {
    if bytes.len() < 4 {
        return Err(IoError::TruncatedFile(path.to_path_buf()));
    }
    if f32_at(bytes, 0) != FLOW_MAGIC {
        return Err(IoError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < 12 {
        return Err(IoError::TruncatedFile(path.to_path_buf()));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let (w, h) = check_dims(path, w.into(), h.into())?;
    check_length(path, bytes, 12 + 8 * w * h)?;
    let mut flow = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let u = f32_at(bytes, 12 + 8 * i);
        let v = f32_at(bytes, 16 + 8 * i);
        let ok = u.abs() <= FLOW_UNKNOWN_THRESHOLD
            && v.abs() <= FLOW_UNKNOWN_THRESHOLD
            && u.is_finite()
            && v.is_finite();
        flow.push(Vector2::new(f64::from(u), f64::from(v)));
        valid.push(ok);
    }
    Ok(FlowField::new(
        Grid::from_vec(w, h, flow).expect("shape"),
        Grid::from_vec(w, h, valid).expect("shape"),
    )
    .expect("shape"))
}

/// Reads a Middlebury `.flo` file.
pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField, IoError> {
    let path = path.as_ref();
    decode_flow(path, &read_bytes(path)?)
}

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.len());
    out.extend_from_slice(&FLOW_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for i in 0..flow.len() {
        let (u, v) = match flow.at(i) {
            Some(f) => (f.x as f32, f.y as f32),
            None => (FLOW_UNKNOWN_VALUE, FLOW_UNKNOWN_VALUE),
        };
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes a Middlebury `.flo` file. Values are stored as `f32`.
pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<(), IoError> {
    write_bytes(path.as_ref(), &encode_flow(flow))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    /// 16-bit grayscale PNG, meters × 256, 0 for no value.
    Png16,
    /// `FDEPTHv1`, u32 width, u32 height, row-major `f32`.
    Float,
}

impl DepthFormat {
    pub fn from_path(path: &Path) -> Result<Self, IoError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("png") => Ok(DepthFormat::Png16),
            Some("fdm") => Ok(DepthFormat::Float),
            _ => Err(IoError::UnknownExtension(path.to_path_buf())),
        }
    }
}

pub fn decode_float_map(path: &Path, bytes: &[u8]) -> Result<Grid<f64>, IoError> {
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 8 && &bytes[..8] != FLOAT_MAP_MAGIC {
            IoError::BadHeader {
                path: path.to_path_buf(),
                reason: "bad magic string".into(),
            }
        } else {
            IoError::TruncatedFile(path.to_path_buf())
        });
    }
    if &bytes[..8] != FLOAT_MAP_MAGIC {
        return Err(IoError::BadHeader {
            path: path.to_path_buf(),
            reason: "bad magic string".into(),
        });
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes"));
    let (w, h) = check_dims(path, w.into(), h.into())?;
    check_length(path, bytes, 16 + 4 * w * h)?;
    let data = (0..w * h).map(|i| f64::from(f32_at(bytes, 16 + 4 * i))).collect();
    Ok(Grid::from_vec(w, h, data).expect("shape"))
}

pub fn encode_float_map(map: &Grid<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    out.extend_from_slice(FLOAT_MAP_MAGIC);
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for &d in map.as_slice() {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    out
}

fn read_png16(path: &Path) -> Result<DepthMap, IoError> {
    let img = image::open(path).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(IoError::BadHeader {
                path: path.to_path_buf(),
                reason: format!("expected 16-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|c| f64::from(c) / PNG_DEPTH_SCALE)
        .collect();
    Ok(Grid::from_vec(w, h, data).expect("shape"))
}

fn write_png16(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let data: Vec<u16> = (0..depth.len())
        .map(|i| {
            if depth.is_valid_depth(i) {
                (depth.as_slice()[i] * PNG_DEPTH_SCALE).round().clamp(1.0, f64::from(u16::MAX)) as u16
            } else {
                0
            }
        })
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        depth.width() as u32,
        depth.height() as u32,
        data,
    )
    .expect("shape");
    img.save(path).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a depth map; the format follows the extension. Missing values come
/// back as 0 (PNG) or as stored (float).
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap, IoError> {
    let path = path.as_ref();
    match DepthFormat::from_path(path)? {
        DepthFormat::Png16 => read_png16(path),
        DepthFormat::Float => decode_float_map(path, &read_bytes(path)?),
    }
}

pub fn write_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<(), IoError> {
    let path = path.as_ref();
    match DepthFormat::from_path(path)? {
        DepthFormat::Png16 => write_png16(path, depth),
        DepthFormat::Float => write_bytes(path, &encode_float_map(depth)),
    }
}

/// Confidence maps use the float format regardless of extension.
pub fn read_confidence(path: impl AsRef<Path>) -> Result<ConfidenceMap, IoError> {
    let path = path.as_ref();
    decode_float_map(path, &read_bytes(path)?)
}

pub fn write_confidence(path: impl AsRef<Path>, confidence: &ConfidenceMap) -> Result<(), IoError> {
    write_bytes(path.as_ref(), &encode_float_map(confidence))
}

/// Closest rotation in the Frobenius sense.
fn reorthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Parses one world-from-camera pose per line: the row-major 3×4 `[R | t]`.
///
/// Blank lines and `#` comments are skipped; line numbers count from 1.
pub fn parse_poses(path: &Path, text: &str) -> Result<Vec<RelativePose>, IoError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || IoError::BadLine {
            path: path.to_path_buf(),
            line: line_no,
        };
        let nums = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?;
        if nums.len() != 12 || nums.iter().any(|v| !v.is_finite()) {
            return Err(bad());
        }
        let mut r = Matrix3::new(
            nums[0], nums[1], nums[2], nums[4], nums[5], nums[6], nums[8], nums[9], nums[10],
        );
        let t = Vector3::new(nums[3], nums[7], nums[11]);
        let error = orthonormality_error(&r);
        let non_rigid = || IoError::NonRigidRotation {
            path: path.to_path_buf(),
            line: line_no,
            error,
        };
        if error > ROTATION_REJECT || r.determinant() <= 0.0 {
            return Err(non_rigid());
        }
        if error > ROTATION_REPAIR {
            log::warn!(
                "{}: line {line_no}: reorthonormalizing rotation (error {error:.2e})",
                path.display()
            );
            r = reorthonormalize(&r);
        } else if error > crate::camera::ROTATION_TOLERANCE {
            r = reorthonormalize(&r);
        }
        out.push(RelativePose::from_matrix(r, t).map_err(|_| non_rigid())?);
    }
    Ok(out)
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<RelativePose>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_poses(path, &text)
}

pub fn format_pose(pose: &RelativePose) -> String {
    let r = pose.rotation_matrix();
    let t = pose.translation();
    let mut vals = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            vals.push(r[(row, col)]);
        }
        vals.push(t[row]);
    }
    // `{:e}` prints the shortest representation that round-trips
    vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ")
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[RelativePose]) -> Result<(), IoError> {
    let mut text = String::new();
    for p in poses {
        text.push_str(&format_pose(p));
        text.push('\n');
    }
    write_bytes(path.as_ref(), text.as_bytes())
}

/// The camera center `O` of a world-from-camera pose.
pub fn camera_center(world_from_camera: &RelativePose) -> Vector3<f64> {
    *world_from_camera.translation()
}

/// Pose taking target-camera coordinates to source-camera coordinates.
pub fn relative_pose(world_from_target: &RelativePose, world_from_source: &RelativePose) -> RelativePose {
    world_from_source.inverse().compose(world_from_target)
}

/// Frames `0..n` with centers taken from world-from-camera poses.
pub fn sequence_from_poses(poses: &[RelativePose]) -> Result<FrameSequence, IoError> {
    let centers: Vec<_> = poses.iter().map(camera_center).collect();
    Ok(FrameSequence::from_centers(&centers)?)
}

/// Contents of an intrinsics file: `fx fy cx cy [width height]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraFile {
    pub intrinsics: Intrinsics,
    pub size: Option<(usize, usize)>,
}

pub fn parse_intrinsics(path: &Path, text: &str) -> Result<CameraFile, IoError> {
    let bad = |reason: String| IoError::BadIntrinsics {
        path: path.to_path_buf(),
        reason,
    };
    let tokens: Vec<&str> = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace)
        .collect();
    if tokens.len() != 4 && tokens.len() != 6 {
        return Err(bad(format!("expected 4 or 6 numbers, found {}", tokens.len())));
    }
    let nums = tokens
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| bad(format!("not a number: `{s}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let intrinsics =
        Intrinsics::new(nums[0], nums[1], nums[2], nums[3]).map_err(|e| bad(e.to_string()))?;
    let size = if nums.len() == 6 {
        let dim = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 && v as usize <= MAX_DIMENSION {
                Ok(v as usize)
            } else {
                Err(bad(format!("bad image dimension {v}")))
            }
        };
        Some((dim(nums[4])?, dim(nums[5])?))
    } else {
        None
    };
    Ok(CameraFile { intrinsics, size })
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<CameraFile, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_intrinsics(path, &text)
}

pub fn write_intrinsics(path: impl AsRef<Path>, cam: &CameraFile) -> Result<(), IoError> {
    let k = &cam.intrinsics;
    let mut text = format!("{:e} {:e} {:e} {:e}", k.fx, k.fy, k.cx, k.cy);
    if let Some((w, h)) = cam.size {
        text.push_str(&format!(" {w} {h}"));
    }
    text.push('\n');
    write_bytes(path.as_ref(), text.as_bytes())
}

fn save_image<P: image::PixelWithColorType>(
    path: &Path,
    img: image::ImageBuffer<P, Vec<P::Subpixel>>,
) -> Result<(), IoError>
where
    [P::Subpixel]: image::EncodableLayout,
{
    img.save(path).map_err(|e| IoError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Confidence as 8-bit grayscale; 0 is black, 1 is white.
pub fn write_confidence_image(path: impl AsRef<Path>, confidence: &ConfidenceMap) -> Result<(), IoError> {
    let data = confidence
        .as_slice()
        .iter()
        .map(|&c| {
            let c = if c.is_finite() { c.clamp(0.0, 1.0) } else { 0.0 };
            (c * 255.0).round() as u8
        })
        .collect();
    let img = image::GrayImage::from_raw(confidence.width() as u32, confidence.height() as u32, data)
        .expect("shape");
    save_image(path.as_ref(), img)
}

/// Blue → cyan → yellow → red ramp over `[0, 1]`.
pub fn heat_color(x: f64) -> [u8; 3] {
    let x = x.clamp(0.0, 1.0);
    let channel = |c: f64| (255.0 * (1.5 - (4.0 * x - c).abs()).clamp(0.0, 1.0)).round() as u8;
    [channel(3.0), channel(2.0), channel(1.0)]
}

/// Inverse-depth heat map: the nearest valid pixel is blue, the farthest
/// red, invalid pixels black.
pub fn depth_to_rgb(depth: &DepthMap) -> Vec<u8> {
    let disp: Vec<Option<f64>> = (0..depth.len())
        .map(|i| depth.is_valid_depth(i).then(|| 1.0 / depth.as_slice()[i]))
        .collect();
    let lo = disp.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = disp.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    disp.iter()
        .flat_map(|d| match d {
            Some(d) => heat_color((hi - d) / span),
            None => [0, 0, 0],
        })
        .collect()
}

pub fn write_depth_image(path: impl AsRef<Path>, depth: &DepthMap) -> Result<(), IoError> {
    let img = image::RgbImage::from_raw(depth.width() as u32, depth.height() as u32, depth_to_rgb(depth))
        .expect("shape");
    save_image(path.as_ref(), img)
}
