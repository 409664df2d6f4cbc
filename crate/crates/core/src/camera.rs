//! Pinhole cameras, view rigs, the inter-view rotation correlation and the
//! sinusoidal camera-rotation encoding.
//!
//! World frame: right-handed, `+y` up, subject at the origin facing `+z`.
//! Camera frame follows the usual computer-vision convention (`x` right,
//! `y` down, `z` forward), so `x_cam = R·x_world + t` and pixels are
//! `(fx·x/z + cx, fy·y/z + cy)`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};

/// Rotations whose orthonormality residual exceeds this are rejected.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image centre, and a vertical
    /// field of view that spans `half_extent` world units either side of the
    /// optical axis at `distance`.
    pub fn framing(width: usize, height: usize, half_extent: f64, distance: f64) -> Result<Self> {
        let f = (height as f64 / 2.0) * distance / half_extent;
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad intrinsics {self:?}")))
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Mat3,
    translation: Vec3,
}

impl CameraExtrinsics {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target` with the given world up-vector.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = geom::sub(target, eye);
        if geom::norm(forward) == 0.0 {
            return Err(Error::InvalidParameter("eye coincides with target".into()));
        }
        let forward = geom::normalize(forward);
        let right = geom::cross(forward, up);
        if geom::norm(right) < 1e-12 {
            return Err(Error::InvalidParameter("view direction parallel to up".into()));
        }
        let right = geom::normalize(right);
        let down = geom::cross(forward, right);
        let rotation = [right, down, forward];
        let translation = geom::scale(geom::mat_vec(&rotation, eye), -1.0);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// Camera centre in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vec3 {
        geom::scale(geom::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        geom::add(geom::mat_vec(&self.rotation, p), self.translation)
    }

    /// Optical axis (camera `+z`) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation[2]
    }
}

pub fn check_rotation(r: &Mat3) -> Result<()> {
    let residual = geom::orthonormality_residual(r);
    let det_err = (geom::det(r) - 1.0).abs();
    if !residual.is_finite() || residual > ROTATION_TOLERANCE || det_err > ROTATION_TOLERANCE {
        return Err(Error::InvalidRotation {
            residual: residual.max(det_err),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    /// Pixel position and camera-space depth of a world point.
    pub fn project(&self, p: Vec3) -> ([f64; 2], f64) {
        let c = self.extrinsics.world_to_camera(p);
        let k = &self.intrinsics;
        ([k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy], c[2])
    }

    /// Unit world-space ray direction through pixel coordinate `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        geom::normalize(geom::mat_t_vec(self.extrinsics.rotation(), d_cam))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRig {
    cameras: Vec<Camera>,
}

impl ViewRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Empty("view rig needs at least one camera".into()));
        }
        for cam in &cameras {
            cam.intrinsics.validate()?;
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn view_count(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.cameras[i]
    }

    /// Sub-rig of consecutive views `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<ViewRig> {
        if len == 0 || start + len > self.cameras.len() {
            return Err(Error::InvalidParameter(format!(
                "rig slice {start}..{} of {} views",
                start + len,
                self.cameras.len()
            )));
        }
        Ok(ViewRig {
            cameras: self.cameras[start..start + len].to_vec(),
        })
    }

    pub fn select(&self, indices: &[usize]) -> Result<ViewRig> {
        let cameras = indices
            .iter()
            .map(|&i| {
                self.cameras
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::InvalidParameter(format!("view index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        ViewRig::new(cameras)
    }

    pub fn with_intrinsics(&self, intrinsics: CameraIntrinsics) -> ViewRig {
        ViewRig {
            cameras: self
                .cameras
                .iter()
                .map(|c| Camera {
                    intrinsics,
                    extrinsics: c.extrinsics,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let shared = self.cameras[0].intrinsics;
        let views = self
            .cameras
            .iter()
            .map(|c| {
                let r = c.extrinsics.rotation();
                ViewJson {
                    r: r.iter().flatten().copied().collect(),
                    t: c.extrinsics.translation().to_vec(),
                    intrinsics: (c.intrinsics != shared).then_some(c.intrinsics),
                }
            })
            .collect();
        Ok(serde_json::to_string_pretty(&RigJson {
            intrinsics: shared,
            views,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RigJson = serde_json::from_str(text)?;
        let cameras = doc
            .views
            .iter()
            .map(|v| {
                if v.r.len() != 9 || v.t.len() != 3 {
                    return Err(Error::format("rig", "R needs 9 values and t needs 3"));
                }
                let rotation = [
                    [v.r[0], v.r[1], v.r[2]],
                    [v.r[3], v.r[4], v.r[5]],
                    [v.r[6], v.r[7], v.r[8]],
                ];
                Ok(Camera {
                    intrinsics: v.intrinsics.unwrap_or(doc.intrinsics),
                    extrinsics: CameraExtrinsics::new(rotation, [v.t[0], v.t[1], v.t[2]])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ViewRig::new(cameras)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct RigJson {
    intrinsics: CameraIntrinsics,
    views: Vec<ViewJson>,
}

#[derive(Serialize, Deserialize)]
struct ViewJson {
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<CameraIntrinsics>,
}

/// Correlation of two camera views, `((tr(RᵢᵀRⱼ) − 1)/2 + 1)/2`.
///
/// The cosine term is clamped to `[-1, 1]` so rounding drift never leaves
/// the unit interval.
pub fn rotation_correlation(r_i: &Mat3, r_j: &Mat3) -> Result<f64> {
    check_rotation(r_i)?;
    check_rotation(r_j)?;
    Ok(correlation_unchecked(r_i, r_j))
}

fn correlation_unchecked(r_i: &Mat3, r_j: &Mat3) -> f64 {
    // tr(RᵢᵀRⱼ) is the Frobenius inner product of Rᵢ and Rⱼ.
    let mut tr = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            tr += r_i[a][b] * r_j[a][b];
        }
    }
    let cosine = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    (cosine + 1.0) / 2.0
}

/// Row-major `m × m` matrix of pairwise view correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    size: usize,
    values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn identity(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
        }
        Self { size, values }
    }

    pub fn ones(size: usize) -> Self {
        Self {
            size,
            values: vec![1.0; size * size],
        }
    }

    /// Validates symmetry, unit diagonal and range.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size || size == 0 {
            return Err(Error::InvalidCorrelation(format!(
                "{} values for a {size}x{size} matrix",
                values.len()
            )));
        }
        for i in 0..size {
            if values[i * size + i] != 1.0 {
                return Err(Error::InvalidCorrelation(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..size {
                let v = values[i * size + j];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidCorrelation(format!("entry ({i},{j}) = {v}")));
                }
                if v != values[j * size + i] {
                    return Err(Error::InvalidCorrelation(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `P C Pᵀ` for the view permutation `perm` (new view `a` is old view `perm[a]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size;
        let mut values = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                values[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        Self { size: n, values }
    }
}

pub fn build_correlation_matrix(rig: &ViewRig) -> Result<CorrelationMatrix> {
    let rotations: Vec<&Mat3> = rig
        .cameras()
        .iter()
        .map(|c| c.extrinsics.rotation())
        .collect();
    for r in &rotations {
        check_rotation(r)?;
    }
    let m = rotations.len();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        values[i * m + i] = 1.0;
        for j in (i + 1)..m {
            let c = correlation_unchecked(rotations[i], rotations[j]);
            values[i * m + j] = c;
            values[j * m + i] = c;
        }
    }
    Ok(CorrelationMatrix { size: m, values })
}

/// Sinusoidal encoding of a flattened rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraToken {
    values: Vec<f64>,
    frequencies: usize,
}

impl CameraToken {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frequencies(&self) -> usize {
        self.frequencies
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per frequency `k = 0..L-1`: nine sines `sin(2ᵏπ·r)` then nine cosines,
/// with `r` the row-major flattening of `rotation`.
pub fn encode_camera_rotation(rotation: &Mat3, frequencies: usize) -> Result<CameraToken> {
    if frequencies == 0 {
        return Err(Error::InvalidParameter("encoding length must be positive".into()));
    }
    let flat: Vec<f64> = rotation.iter().flatten().copied().collect();
    let mut values = Vec::with_capacity(18 * frequencies);
    for k in 0..frequencies {
        let w = f64::powi(2.0, k as i32) * PI;
        values.extend(flat.iter().map(|r| (w * r).sin()));
        values.extend(flat.iter().map(|r| (w * r).cos()));
    }
    Ok(CameraToken {
        values,
        frequencies,
    })
}

/// Camera on a circle of `radius` around the vertical axis at `elevation`,
/// looking at the origin. Azimuth 0 sits on `+z` (the subject's front).
pub fn orbit_camera(
    intrinsics: CameraIntrinsics,
    azimuth: f64,
    radius: f64,
    elevation: f64,
) -> Result<Camera> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!("orbit radius {radius}")));
    }
    if elevation.abs() >= PI / 2.0 - 1e-6 {
        return Err(Error::InvalidParameter(format!("elevation {elevation} is too steep")));
    }
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    let eye = [radius * ce * sa, radius * se, radius * ce * ca];
    Ok(Camera {
        intrinsics,
        extrinsics: CameraExtrinsics::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0])?,
    })
}

pub fn rig_from_azimuths(
    intrinsics: CameraIntrinsics,
    azimuths: &[f64],
    radius: f64,
    elevation: f64,
) -> Result<ViewRig> {
    let cameras = azimuths
        .iter()
        .map(|&a| orbit_camera(intrinsics, a, radius, elevation))
        .collect::<Result<Vec<_>>>()?;
    ViewRig::new(cameras)
}

/// Azimuths drawn uniformly from `[0, 2π)` with a seeded ChaCha generator.
pub fn sample_azimuths(m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let a = unit * TAU;
            if a >= TAU {
                0.0
            } else {
                a
            }
        })
        .collect()
}

pub fn sample_azimuth_rig(
    intrinsics: CameraIntrinsics,
    m: usize,
    radius: f64,
    elevation: f64,
    seed: u64,
) -> Result<ViewRig> {
    if m == 0 {
        return Err(Error::InvalidParameter("view count must be positive".into()));
    }
    rig_from_azimuths(intrinsics, &sample_azimuths(m, seed), radius, elevation)
}

pub fn uniform_azimuths(n: usize) -> Vec<f64> {
    (0..n).map(|k| TAU * k as f64 / n as f64).collect()
}

pub fn uniform_rig(
    intrinsics: CameraIntrinsics,
    n: usize,
    radius: f64,
    elevation: f64,
) -> Result<ViewRig> {
    if n == 0 {
        return Err(Error::InvalidParameter("view count must be positive".into()));
    }
    rig_from_azimuths(intrinsics, &uniform_azimuths(n), radius, elevation)
}
