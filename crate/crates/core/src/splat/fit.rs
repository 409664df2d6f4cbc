use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::splat::{render, render_with_grad, Gaussian, GaussianCloud, SplatConfig, PARAMS_PER_GAUSSIAN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    /// Views per iteration; 0 uses every view.
    pub views_per_iter: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub splat: SplatConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            lr: 0.01,
            seed: 0,
            views_per_iter: 0,
            min_scale: 1e-3,
            max_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            splat: SplatConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub cloud: GaussianCloud,
    /// Mean squared error of each view at the returned cloud.
    pub view_losses: Vec<f64>,
    /// Mean loss over the views used at each iteration (before the update).
    pub trace: Vec<f64>,
}

/// Mean per-sample squared error between a render and a target image.
pub fn photometric_loss(cloud: &GaussianCloud, cam: &Camera, target: &Image, cfg: &SplatConfig) -> Result<f64> {
    render(cloud, cam, cfg)?.image.mse(target)
}

/// Adam on the mean (over views) per-pixel squared error. After every step
/// quaternions are renormalised and scale, opacity and colour are clamped
/// back into their valid ranges.
pub fn fit_cloud(targets: &[(Image, Camera)], init: &GaussianCloud, cfg: &FitConfig) -> Result<FitResult> {
    if targets.is_empty() {
        return Err(Error::Empty("no target views to fit".into()));
    }
    if targets.len() < 2 {
        return Err(Error::InvalidParameter("fitting needs at least two views".into()));
    }
    for (img, cam) in targets {
        let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
        if img.dims() != (w, h, 3) {
            return Err(Error::Shape(format!("target {:?} for a {w}x{h} camera", img.dims())));
        }
    }
    let n = init.len();
    let mut params: Vec<f64> = init.gaussians.iter().flat_map(|g| g.to_params()).collect();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let per_iter = match cfg.views_per_iter {
        0 => targets.len(),
        k => k.min(targets.len()),
    };
    let mut trace = Vec::with_capacity(cfg.iters);
    let mut cloud = init.clone();
    for it in 0..cfg.iters {
        if per_iter < targets.len() {
            order.shuffle(&mut rng);
        }
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        for &vi in &order[..per_iter] {
            let (target, cam) = &targets[vi];
            let count = target.data().len() as f64;
            let (out, grads) = render_with_grad(&cloud, cam, &cfg.splat, |out| {
                let up = out
                    .image
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(r, t)| 2.0 * (r - t) / (count * per_iter as f64))
                    .collect();
                Image::from_vec(target.width(), target.height(), 3, up)
            })?;
            loss += out.image.mse(target)? / per_iter as f64;
            for (gi, g) in grads.iter().enumerate() {
                for (k, d) in g.to_params().iter().enumerate() {
                    grad[gi * PARAMS_PER_GAUSSIAN + k] += d;
                }
            }
        }
        trace.push(loss);
        let step = (it + 1) as i32;
        let c1 = 1.0 - cfg.beta1.powi(step);
        let c2 = 1.0 - cfg.beta2.powi(step);
        for i in 0..params.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-12);
        }
        for g in params.chunks_exact_mut(PARAMS_PER_GAUSSIAN) {
            project_valid(g, cfg);
        }
        cloud = GaussianCloud {
            gaussians: params.chunks_exact(PARAMS_PER_GAUSSIAN).map(Gaussian::from_params).collect(),
        };
    }
    debug_assert_eq!(cloud.len(), n);
    let view_losses = targets
        .iter()
        .map(|(img, cam)| photometric_loss(&cloud, cam, img, &cfg.splat))
        .collect::<Result<_>>()?;
    Ok(FitResult {
        cloud,
        view_losses,
        trace,
    })
}

fn project_valid(p: &mut [f64], cfg: &FitConfig) {
    for s in &mut p[3..6] {
        *s = s.clamp(cfg.min_scale, cfg.max_scale);
    }
    let q = &mut p[6..10];
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) || !norm.is_finite() {
        q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    } else if (norm - 1.0).abs() > 1e-12 {
        q.iter_mut().for_each(|v| *v /= norm);
    }
    p[10] = p[10].clamp(0.0, 1.0);
    for c in &mut p[11..14] {
        *c = c.clamp(0.0, 1.0);
    }
}
