//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use mvedit::camera::{orbit_camera, Camera, CameraIntrinsics};
use mvedit::image::Image;
use mvedit::splat::{Gaussian, GaussianCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                o[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    o
}

fn t3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = a[j][i];
        }
    }
    o
}

/// Rotation matrix of a (not necessarily unit) quaternion, from the
/// axis-angle form rather than the polynomial one.
pub fn quat_rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let s = (x * x + y * y + z * z).sqrt();
    if s < 1e-300 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let angle = 2.0 * s.atan2(w);
    let (u, v, k) = (x / s, y / s, z / s);
    let (sn, cs) = angle.sin_cos();
    let c1 = 1.0 - cs;
    [
        [cs + u * u * c1, u * v * c1 - k * sn, u * k * c1 + v * sn],
        [v * u * c1 + k * sn, cs + v * v * c1, v * k * c1 - u * sn],
        [k * u * c1 - v * sn, k * v * c1 + u * sn, cs + k * k * c1],
    ]
}

/// Per-pixel compositing with no support truncation: every Gaussian is
/// evaluated at every pixel, in depth order (ties by index).
pub fn brute_force_render(cloud: &GaussianCloud, cam: &Camera, lambda: f64, near: f64) -> (Image, Image) {
    let k = cam.intrinsics;
    let rot = *cam.extrinsics.rotation();
    let tr = cam.extrinsics.translation();
    struct P {
        depth: f64,
        idx: usize,
        mu: [f64; 2],
        inv: [f64; 3],
        o: f64,
        c: [f64; 3],
    }
    let mut ps = Vec::new();
    for (idx, g) in cloud.gaussians.iter().enumerate() {
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = (0..3).map(|j| rot[i][j] * g.mu[j]).sum::<f64>() + tr[i];
        }
        if p[2] <= near {
            continue;
        }
        let r = quat_rotation(g.quat);
        let s2 = [
            [g.scale[0] * g.scale[0], 0.0, 0.0],
            [0.0, g.scale[1] * g.scale[1], 0.0],
            [0.0, 0.0, g.scale[2] * g.scale[2]],
        ];
        let cov_world = mul3(&mul3(&r, &s2), &t3(&r));
        let cov_cam = mul3(&mul3(&rot, &cov_world), &t3(&rot));
        let j = [
            [k.fx / p[2], 0.0, -k.fx * p[0] / (p[2] * p[2])],
            [0.0, k.fy / p[2], -k.fy * p[1] / (p[2] * p[2])],
        ];
        let mut s = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                for u in 0..3 {
                    for v in 0..3 {
                        s[a][b] += j[a][u] * cov_cam[u][v] * j[b][v];
                    }
                }
            }
        }
        s[0][0] += lambda;
        s[1][1] += lambda;
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        ps.push(P {
            depth: p[2],
            idx,
            mu: [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy],
            inv: [s[1][1] / det, -s[0][1] / det, s[0][0] / det],
            o: g.opacity,
            c: g.color,
        });
    }
    ps.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.idx.cmp(&b.idx)));
    let mut img = Image::new(k.width, k.height, 3);
    let mut alpha = Image::new(k.width, k.height, 1);
    for y in 0..k.height {
        for x in 0..k.width {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for p in &ps {
                let dx = x as f64 - p.mu[0];
                let dy = y as f64 - p.mu[1];
                let q = p.inv[0] * dx * dx + 2.0 * p.inv[1] * dx * dy + p.inv[2] * dy * dy;
                let a = p.o * (-0.5 * q).exp();
                for ch in 0..3 {
                    c[ch] += t * a * p.c[ch];
                }
                t *= 1.0 - a;
            }
            for ch in 0..3 {
                img.set(x, y, ch, c[ch]);
            }
            alpha.set(x, y, 0, 1.0 - t);
        }
    }
    (img, alpha)
}

pub fn random_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0);
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.1 && n < 1.0 {
            return q.map(|v| v / n);
        }
    }
}

pub fn random_gaussian(rng: &mut ChaCha8Rng, spread: f64) -> Gaussian {
    let mu = std::array::from_fn(|_| (rng.random::<f64>() * 2.0 - 1.0) * spread);
    let scale = std::array::from_fn(|_| 0.05 + 0.25 * rng.random::<f64>());
    let color = std::array::from_fn(|_| rng.random::<f64>());
    Gaussian::new(mu, scale, random_quat(rng), 0.2 + 0.8 * rng.random::<f64>(), color).unwrap()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> GaussianCloud {
    GaussianCloud::new((0..n).map(|_| random_gaussian(rng, spread)).collect()).unwrap()
}

pub fn random_camera(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Camera {
    let intr = CameraIntrinsics::framing(w, h, 1.2, 3.0).unwrap();
    let az = rng.random::<f64>() * std::f64::consts::TAU;
    let el = (rng.random::<f64>() - 0.5) * 1.0;
    orbit_camera(intr, az, 3.0, el).unwrap()
}
