//! 3D Gaussian splatting: projection, front-to-back compositing with
//! analytic gradients, photometric fitting and the `GSPL` cloud format.

mod fit;
mod io;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};

pub use fit::{fit_cloud, photometric_loss, FitConfig, FitResult};
pub use io::{decode_cloud, encode_cloud, load_cloud, save_cloud, CLOUD_MAGIC, CLOUD_VERSION};
pub use render::{render, render_grad, render_with_grad, GaussianGrad, RenderOutput};

/// Floats per Gaussian in flat parameter vectors and cloud files.
pub const PARAMS_PER_GAUSSIAN: usize = 14;

const QUAT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatConfig {
    /// Added to every projected covariance, in px².
    pub lambda_blur: f64,
    /// Gaussians at camera depth `≤ near` are culled.
    pub near: f64,
    /// A Gaussian is evaluated only where its weight exceeds this.
    pub min_weight: f64,
}

impl Default for SplatConfig {
    fn default() -> Self {
        Self {
            lambda_blur: 0.3,
            near: 1e-2,
            min_weight: 1e-12,
        }
    }
}

impl SplatConfig {
    /// Squared Mahalanobis radius of the evaluated support.
    pub fn cutoff_q(&self) -> f64 {
        -2.0 * self.min_weight.ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mu: Vec3,
    pub scale: Vec3,
    /// `(w, x, y, z)`.
    pub quat: [f64; 4],
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian {
    pub fn new(mu: Vec3, scale: Vec3, quat: [f64; 4], opacity: f64, color: Vec3) -> Result<Self> {
        let g = Self {
            mu,
            scale,
            quat,
            opacity,
            color,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn isotropic(mu: Vec3, s: f64, opacity: f64, color: Vec3) -> Result<Self> {
        Self::new(mu, [s; 3], [1.0, 0.0, 0.0, 0.0], opacity, color)
    }

    pub fn validate(&self) -> Result<()> {
        let qn = self.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > QUAT_TOLERANCE {
            return Err(Error::InvalidParameter(format!("quaternion norm {qn}")));
        }
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale {:?}", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::InvalidParameter(format!("opacity {}", self.opacity)));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidParameter(format!("color {:?}", self.color)));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidParameter("non-finite mean".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Mat3> {
        covariance_from_scale_rot(self.scale, self.quat)
    }

    pub fn to_params(&self) -> [f64; PARAMS_PER_GAUSSIAN] {
        let mut p = [0.0; PARAMS_PER_GAUSSIAN];
        p[0..3].copy_from_slice(&self.mu);
        p[3..6].copy_from_slice(&self.scale);
        p[6..10].copy_from_slice(&self.quat);
        p[10] = self.opacity;
        p[11..14].copy_from_slice(&self.color);
        p
    }

    /// Unvalidated inverse of `to_params`.
    pub fn from_params(p: &[f64]) -> Self {
        Self {
            mu: [p[0], p[1], p[2]],
            scale: [p[3], p[4], p[5]],
            quat: [p[6], p[7], p[8], p[9]],
            opacity: p[10],
            color: [p[11], p[12], p[13]],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Result<Self> {
        for g in &gaussians {
            g.validate()?;
        }
        Ok(Self { gaussians })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// `count` isotropic Gaussians with means uniform in the box `[lo, hi]`.
    pub fn random_in_box(
        count: usize,
        lo: Vec3,
        hi: Vec3,
        scale: f64,
        opacity: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..count)
            .map(|_| {
                let mu = std::array::from_fn(|k| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>());
                let color = std::array::from_fn(|_| 0.25 + 0.5 * rng.random::<f64>());
                Gaussian::isotropic(mu, scale, opacity, color)
            })
            .collect::<Result<_>>()?;
        Ok(Self { gaussians })
    }
}

/// `Σ = R(q)·diag(scale²)·R(q)ᵀ`; the quaternion is normalised first.
pub fn covariance_from_scale_rot(scale: Vec3, quat: [f64; 4]) -> Result<Mat3> {
    let r = geom::quat_to_mat(normalize_quat(quat)?);
    let mut s = [[0.0; 3]; 3];
    for (i, row) in s.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| r[i][k] * scale[k] * scale[k] * r[j][k]).sum();
        }
    }
    Ok(s)
}

pub(crate) fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::ZeroQuaternion);
    }
    Ok(q.map(|v| v / n))
}

/// A Gaussian in screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mu2d: [f64; 2],
    /// `[σxx, σxy, σyy]`, regularised.
    pub sigma2d: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vec3,
}

/// Projects one Gaussian; `None` when it lies at or in front of the near plane.
pub fn project_gaussian(g: &Gaussian, cam: &Camera, cfg: &SplatConfig) -> Result<Option<ProjectedGaussian>> {
    let p = cam.extrinsics.world_to_camera(g.mu);
    if p[2] <= cfg.near {
        return Ok(None);
    }
    let m = screen_jacobian(cam, p);
    let cov = g.covariance()?;
    let s = project_cov(&m, &cov, cfg.lambda_blur);
    let k = &cam.intrinsics;
    Ok(Some(ProjectedGaussian {
        mu2d: [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy],
        sigma2d: s,
        depth: p[2],
        opacity: g.opacity,
        color: g.color,
    }))
}

/// `J·W`: the perspective Jacobian at camera point `p` times the camera rotation.
fn screen_jacobian(cam: &Camera, p: Vec3) -> [[f64; 3]; 2] {
    let k = &cam.intrinsics;
    let (x, y, z) = (p[0], p[1], p[2]);
    let j = [
        [k.fx / z, 0.0, -k.fx * x / (z * z)],
        [0.0, k.fy / z, -k.fy * y / (z * z)],
    ];
    let w = cam.extrinsics.rotation();
    let mut m = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            m[r][c] = (0..3).map(|i| j[r][i] * w[i][c]).sum();
        }
    }
    m
}

fn project_cov(m: &[[f64; 3]; 2], cov: &Mat3, lambda: f64) -> [f64; 3] {
    let mut ms = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ms[r][c] = (0..3).map(|i| m[r][i] * cov[i][c]).sum();
        }
    }
    let e = |a: usize, b: usize| -> f64 { (0..3).map(|i| ms[a][i] * m[b][i]).sum() };
    [e(0, 0) + lambda, e(0, 1), e(1, 1) + lambda]
}
