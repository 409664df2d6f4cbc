use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::image::Image;
use crate::splat::{normalize_quat, project_cov, screen_jacobian, GaussianCloud, SplatConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Single-channel accumulated opacity `1 − Π(1 − αᵢgᵢ)`.
    pub alpha: Image,
}

/// Gradient of a scalar loss w.r.t. one Gaussian's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vec3,
    pub scale: Vec3,
    pub quat: [f64; 4],
    pub opacity: f64,
    pub color: Vec3,
}

impl GaussianGrad {
    pub fn to_params(&self) -> [f64; 14] {
        let mut p = [0.0; 14];
        p[0..3].copy_from_slice(&self.mu);
        p[3..6].copy_from_slice(&self.scale);
        p[6..10].copy_from_slice(&self.quat);
        p[10] = self.opacity;
        p[11..14].copy_from_slice(&self.color);
        p
    }
}

struct Splat {
    index: usize,
    cam_point: Vec3,
    mu2d: [f64; 2],
    inv: [f64; 3],
    depth: f64,
    opacity: f64,
    color: Vec3,
    /// Pixel bounds (inclusive) of the evaluated support.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn prepare(cloud: &GaussianCloud, cam: &Camera, cfg: &SplatConfig) -> Result<Vec<Splat>> {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let q_max = cfg.cutoff_q();
    let k = &cam.intrinsics;
    let mut out = Vec::with_capacity(cloud.len());
    for (index, g) in cloud.gaussians.iter().enumerate() {
        let p = cam.extrinsics.world_to_camera(g.mu);
        if p[2] <= cfg.near {
            continue;
        }
        let m = screen_jacobian(cam, p);
        let sigma = project_cov(&m, &g.covariance()?, cfg.lambda_blur);
        let det = sigma[0] * sigma[2] - sigma[1] * sigma[1];
        if !(det > 0.0) {
            continue;
        }
        let inv = [sigma[2] / det, -sigma[1] / det, sigma[0] / det];
        let mu2d = [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy];
        let rx = (q_max * sigma[0]).sqrt();
        let ry = (q_max * sigma[2]).sqrt();
        let (lo_x, hi_x) = ((mu2d[0] - rx).ceil(), (mu2d[0] + rx).floor());
        let (lo_y, hi_y) = ((mu2d[1] - ry).ceil(), (mu2d[1] + ry).floor());
        if hi_x < 0.0 || hi_y < 0.0 || lo_x > (w - 1) as f64 || lo_y > (h - 1) as f64 {
            continue;
        }
        out.push(Splat {
            index,
            cam_point: p,
            mu2d,
            inv,
            depth: p[2],
            opacity: g.opacity,
            color: g.color,
            x0: lo_x.max(0.0) as usize,
            x1: hi_x.min((w - 1) as f64) as usize,
            y0: lo_y.max(0.0) as usize,
            y1: hi_y.min((h - 1) as f64) as usize,
        });
    }
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// Weight `exp(−½ dᵀΣ′⁻¹d)` at pixel `(x, y)`, or `None` outside the support.
#[inline]
fn weight(s: &Splat, x: usize, y: usize, q_max: f64) -> Option<(f64, [f64; 2])> {
    let d = [x as f64 - s.mu2d[0], y as f64 - s.mu2d[1]];
    let q = s.inv[0] * d[0] * d[0] + 2.0 * s.inv[1] * d[0] * d[1] + s.inv[2] * d[1] * d[1];
    (q <= q_max).then(|| ((-0.5 * q).exp(), d))
}

#[derive(Debug, Clone, Copy)]
struct Fragment {
    splat: u32,
    g: f64,
    d: [f64; 2],
}

/// Fragments grouped by pixel; pixel `p` owns `items[start[p]..start[p + 1]]`,
/// front to back.
#[derive(Default)]
struct Fragments {
    start: Vec<usize>,
    items: Vec<Fragment>,
}

fn composite(splats: &[Splat], w: usize, h: usize, cfg: &SplatConfig, record: bool) -> (RenderOutput, Fragments) {
    let q_max = cfg.cutoff_q();
    let mut color = vec![0.0; w * h * 3];
    let mut trans = vec![1.0; w * h];
    // (pixel, fragment) in splat order, bucketed by pixel afterwards
    let mut raw: Vec<(u32, Fragment)> = Vec::new();
    for (si, s) in splats.iter().enumerate() {
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let Some((g, d)) = weight(s, x, y, q_max) else { continue };
                let p = y * w + x;
                let a = s.opacity * g;
                let t = trans[p];
                for c in 0..3 {
                    color[p * 3 + c] += t * a * s.color[c];
                }
                trans[p] = t * (1.0 - a);
                if record {
                    raw.push((p as u32, Fragment { splat: si as u32, g, d }));
                }
            }
        }
    }
    let mut frags = Fragments::default();
    if record {
        let mut start = vec![0usize; w * h + 1];
        for (p, _) in &raw {
            start[*p as usize + 1] += 1;
        }
        for p in 0..w * h {
            start[p + 1] += start[p];
        }
        let mut next = start.clone();
        let mut items = vec![Fragment { splat: 0, g: 0.0, d: [0.0; 2] }; raw.len()];
        for (p, f) in raw {
            items[next[p as usize]] = f;
            next[p as usize] += 1;
        }
        frags = Fragments { start, items };
    }
    let alpha = trans.iter().map(|t| 1.0 - t).collect();
    (
        RenderOutput {
            image: Image::from_vec(w, h, 3, color).expect("sized"),
            alpha: Image::from_vec(w, h, 1, alpha).expect("sized"),
        },
        frags,
    )
}

/// Front-to-back alpha compositing of the cloud onto a black background.
/// Pixel `(x, y)` samples the image plane at integer coordinates.
pub fn render(cloud: &GaussianCloud, cam: &Camera, cfg: &SplatConfig) -> Result<RenderOutput> {
    let splats = prepare(cloud, cam, cfg)?;
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    Ok(composite(&splats, w, h, cfg, false).0)
}

/// Reverse-mode gradients of `⟨upstream, image⟩ + ⟨upstream_alpha, alpha⟩`
/// w.r.t. every Gaussian. Culled Gaussians get zero gradients.
pub fn render_grad(
    cloud: &GaussianCloud,
    cam: &Camera,
    cfg: &SplatConfig,
    upstream: &Image,
    upstream_alpha: Option<&Image>,
) -> Result<Vec<GaussianGrad>> {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    if upstream.dims() != (w, h, 3) {
        return Err(Error::Shape(format!("upstream {:?} for a {w}x{h} camera", upstream.dims())));
    }
    if let Some(a) = upstream_alpha {
        if a.dims() != (w, h, 1) {
            return Err(Error::Shape(format!("alpha upstream {:?} for a {w}x{h} camera", a.dims())));
        }
    }
    let splats = prepare(cloud, cam, cfg)?;
    let (_, frags) = composite(&splats, w, h, cfg, true);
    backward(cloud, cam, &splats, &frags, upstream, upstream_alpha)
}

/// Renders once and back-propagates the upstream image gradient that
/// `upstream` derives from the rendered output.
pub fn render_with_grad<F>(
    cloud: &GaussianCloud,
    cam: &Camera,
    cfg: &SplatConfig,
    upstream: F,
) -> Result<(RenderOutput, Vec<GaussianGrad>)>
where
    F: FnOnce(&RenderOutput) -> Result<Image>,
{
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let splats = prepare(cloud, cam, cfg)?;
    let (out, frags) = composite(&splats, w, h, cfg, true);
    let up = upstream(&out)?;
    if up.dims() != (w, h, 3) {
        return Err(Error::Shape(format!("upstream {:?} for a {w}x{h} camera", up.dims())));
    }
    let grads = backward(cloud, cam, &splats, &frags, &up, None)?;
    Ok((out, grads))
}

fn backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    splats: &[Splat],
    frags: &Fragments,
    upstream: &Image,
    upstream_alpha: Option<&Image>,
) -> Result<Vec<GaussianGrad>> {
    let w = cam.intrinsics.width;
    // screen-space accumulators per splat: opacity, colour, mean, Σ′⁻¹
    let mut g_op = vec![0.0; splats.len()];
    let mut g_col = vec![[0.0; 3]; splats.len()];
    let mut g_mu = vec![[0.0; 2]; splats.len()];
    let mut g_inv = vec![[0.0; 3]; splats.len()];
    let mut trans = Vec::new();
    let h = cam.intrinsics.height;
    for p in 0..w * h {
        let list = &frags.items[frags.start[p]..frags.start[p + 1]];
        if list.is_empty() {
            continue;
        }
        let up = upstream.pixel(p % w, p / w);
        let up_a = upstream_alpha.map_or(0.0, |a| a.data()[p]);
        trans.clear();
        let mut t = 1.0;
        for f in list {
            trans.push(t);
            t *= 1.0 - splats[f.splat as usize].opacity * f.g;
        }
        let mut rest = [0.0; 3];
        let mut keep = 1.0;
        for (k, f) in list.iter().enumerate().rev() {
            let (si, g, d) = (f.splat as usize, f.g, f.d);
            let s = &splats[si];
            let a = s.opacity * g;
            let t = trans[k];
            let mut d_a = up_a * t * keep;
            for c in 0..3 {
                d_a += up[c] * t * (s.color[c] - rest[c]);
                g_col[si][c] += up[c] * t * a;
                rest[c] = s.color[c] * a + (1.0 - a) * rest[c];
            }
            keep *= 1.0 - a;
            g_op[si] += d_a * g;
            let d_q = -0.5 * g * d_a * s.opacity;
            let ad = [s.inv[0] * d[0] + s.inv[1] * d[1], s.inv[1] * d[0] + s.inv[2] * d[1]];
            g_mu[si][0] -= 2.0 * d_q * ad[0];
            g_mu[si][1] -= 2.0 * d_q * ad[1];
            g_inv[si][0] += d_q * d[0] * d[0];
            g_inv[si][1] += d_q * d[0] * d[1];
            g_inv[si][2] += d_q * d[1] * d[1];
        }
    }

    let mut grads = vec![GaussianGrad::default(); cloud.len()];
    let k = &cam.intrinsics;
    let wrot = cam.extrinsics.rotation();
    for (si, s) in splats.iter().enumerate() {
        let g = &cloud.gaussians[s.index];
        let out = &mut grads[s.index];
        out.opacity = g_op[si];
        out.color = g_col[si];

        // dL/dΣ′ = −A·G·A with A = Σ′⁻¹ and G the (full) gradient w.r.t. A
        let a = [[s.inv[0], s.inv[1]], [s.inv[1], s.inv[2]]];
        let gm = [[g_inv[si][0], g_inv[si][1]], [g_inv[si][1], g_inv[si][2]]];
        let mut g2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for u in 0..2 {
                    for v in 0..2 {
                        acc += a[i][u] * gm[u][v] * a[v][j];
                    }
                }
                g2[i][j] = -acc;
            }
        }

        let p = s.cam_point;
        let (x, y, z) = (p[0], p[1], p[2]);
        let m = screen_jacobian(cam, p);
        let cov = g.covariance()?;

        // dL/dΣ = Mᵀ G₂ M
        let mut g_cov = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for u in 0..2 {
                    for v in 0..2 {
                        acc += m[u][i] * g2[u][v] * m[v][j];
                    }
                }
                g_cov[i][j] = acc;
            }
        }
        // dL/dM = 2·G₂·M·Σ, then dL/dJ = dL/dM·Wᵀ
        let mut g_m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                let mut acc = 0.0;
                for u in 0..2 {
                    for i in 0..3 {
                        acc += g2[r][u] * m[u][i] * cov[i][c];
                    }
                }
                g_m[r][c] = 2.0 * acc;
            }
        }
        let mut g_j = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                g_j[r][c] = (0..3).map(|i| g_m[r][i] * wrot[c][i]).sum();
            }
        }
        let z2 = z * z;
        let z3 = z2 * z;
        let gm2 = g_mu[si];
        let d_cam = [
            -k.fx / z2 * g_j[0][2] + gm2[0] * k.fx / z,
            -k.fy / z2 * g_j[1][2] + gm2[1] * k.fy / z,
            -k.fx / z2 * g_j[0][0] + 2.0 * k.fx * x / z3 * g_j[0][2] - k.fy / z2 * g_j[1][1]
                + 2.0 * k.fy * y / z3 * g_j[1][2]
                - gm2[0] * k.fx * x / z2
                - gm2[1] * k.fy * y / z2,
        ];
        out.mu = geom::mat_t_vec(wrot, d_cam);

        // Σ = R·S²·Rᵀ
        let qn = normalize_quat(g.quat)?;
        let r = geom::quat_to_mat(qn);
        let sc = g.scale;
        let mut g_r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g_r[i][j] = 2.0 * (0..3).map(|u| g_cov[i][u] * r[u][j]).sum::<f64>() * sc[j] * sc[j];
            }
        }
        for kk in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += g_cov[i][j] * r[i][kk] * r[j][kk];
                }
            }
            out.scale[kk] = 2.0 * sc[kk] * acc;
        }
        let [qw, qx, qy, qz] = qn;
        let gr = &g_r;
        let dq = [
            2.0 * (-qz * gr[0][1] + qy * gr[0][2] + qz * gr[1][0] - qx * gr[1][2] - qy * gr[2][0] + qx * gr[2][1]),
            2.0 * (qy * gr[0][1] + qz * gr[0][2] + qy * gr[1][0] - 2.0 * qx * gr[1][1] - qw * gr[1][2]
                + qz * gr[2][0]
                + qw * gr[2][1]
                - 2.0 * qx * gr[2][2]),
            2.0 * (-2.0 * qy * gr[0][0] + qx * gr[0][1] + qw * gr[0][2] + qx * gr[1][0] + qz * gr[1][2]
                - qw * gr[2][0]
                + qz * gr[2][1]
                - 2.0 * qy * gr[2][2]),
            2.0 * (-2.0 * qz * gr[0][0] - qw * gr[0][1] + qx * gr[0][2] + qw * gr[1][0] - 2.0 * qz * gr[1][1]
                + qy * gr[1][2]
                + qx * gr[2][0]
                + qy * gr[2][1]),
        ];
        let norm = g.quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        let proj: f64 = (0..4).map(|i| qn[i] * dq[i]).sum();
        out.quat = std::array::from_fn(|i| (dq[i] - qn[i] * proj) / norm);
    }
    Ok(grads)
}
