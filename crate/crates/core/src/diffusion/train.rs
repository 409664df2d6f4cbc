//! Adam training on the ε-prediction objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::ViewRig;
use crate::diffusion::{ConditioningBundle, LatentImage, LossItem, ToyDenoiser};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Mat;

/// One supervised subject: conditioning images plus the target views the
/// denoiser should produce.
#[derive(Debug, Clone)]
pub struct TrainingSubject {
    pub rig: ViewRig,
    pub garment_front: Image,
    pub garment_back: Image,
    pub normals: Vec<Image>,
    pub agnostic: Vec<Image>,
    pub targets: Vec<Image>,
}

impl TrainingSubject {
    pub fn validate(&self) -> Result<()> {
        let n = self.rig.view_count();
        if self.normals.len() != n || self.agnostic.len() != n || self.targets.len() != n {
            return Err(Error::Dimension(format!(
                "subject has {n} cameras but {} normals, {} agnostic, {} targets",
                self.normals.len(),
                self.agnostic.len(),
                self.targets.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// One view per item.
    SingleView,
    /// `views` views per item, jointly attended.
    MultiView,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Items per step.
    pub batch_size: usize,
    /// Views per item in the multi-view stage.
    pub views: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; non-positive disables it.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 2e-3,
            batch_size: 1,
            views: 8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Adam moments and the global step counter. The step counter also keys
/// the per-step random stream, so resuming from a saved state continues
/// exactly where an uninterrupted run would be.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

impl AdamState {
    pub fn new(model: &ToyDenoiser) -> Self {
        let zeros: BTreeMap<String, Mat> = model
            .params()
            .iter()
            .map(|(k, p)| (k.clone(), Mat::zeros(p.rows(), p.cols())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One Adam update of `params` with bias-corrected moments.
    pub fn apply(
        &mut self,
        params: &mut BTreeMap<String, Mat>,
        grads: &BTreeMap<String, Mat>,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let k = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(k);
        let c2 = 1.0 - cfg.beta2.powi(k);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidParameter(format!("no gradient for {name}")))?;
            let m = self
                .m
                .get_mut(name)
                .ok_or_else(|| Error::InvalidParameter(format!("no optimizer state for {name}")))?;
            let v = self.v.get_mut(name).expect("m and v share keys");
            if g.shape() != p.shape() || m.shape() != p.shape() {
                return Err(Error::Dimension(format!("optimizer shape mismatch for {name}")));
            }
            for i in 0..p.data().len() {
                let gi = g.data()[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

fn draw_item(
    model: &ToyDenoiser,
    subjects: &[TrainingSubject],
    stage: Stage,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossItem> {
    let s = &subjects[rng.random_range(0..subjects.len())];
    let n = s.rig.view_count();
    let m = match stage {
        Stage::SingleView => 1,
        Stage::MultiView => cfg.views.clamp(1, n),
    };
    // partial Fisher-Yates for m distinct views
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let views = &order[..m];
    let rig = s.rig.select(views)?;
    let pick = |v: &[Image]| views.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let ae = model.autoencoder();
    let cfg_m = model.config();
    let cond = ConditioningBundle::from_images(
        &ae,
        &s.garment_front,
        &s.garment_back,
        &pick(&s.normals),
        &pick(&s.agnostic),
        &rig,
        cfg_m.frequencies,
        cfg_m.correlation,
    )?;
    let z0: Vec<LatentImage> = views
        .iter()
        .map(|&i| ae.encode(&s.targets[i]))
        .collect::<Result<_>>()?;
    let t = rng.random_range(0..cfg_m.timesteps);
    let eps = z0
        .iter()
        .map(|z| {
            let (c, h, w) = z.dims();
            let data = (0..c * h * w).map(|_| StandardNormal.sample(&mut *rng)).collect();
            LatentImage::from_token_data(h, w, c, data)
        })
        .collect::<Result<_>>()?;
    Ok(LossItem { cond, z0, eps, t })
}

/// Runs `cfg.steps` optimizer steps and returns the per-step loss trace.
/// Step `k` (global, from `state.step`) draws its items from the stream
/// `(cfg.seed, k)`.
pub fn train(
    model: &mut ToyDenoiser,
    state: &mut AdamState,
    subjects: &[TrainingSubject],
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if subjects.is_empty() {
        return Err(Error::Empty("training set has no subjects".into()));
    }
    for s in subjects {
        s.validate()?;
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(state.step);
        let items = (0..cfg.batch_size)
            .map(|_| draw_item(model, subjects, stage, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grads) = model.loss_and_grads(&items)?;
        if cfg.clip_norm > 0.0 {
            let norm = grads.values().map(Mat::sum_sq).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                for g in grads.values_mut() {
                    *g = g.scale(s);
                }
            }
        }
        state.apply(model.params_mut(), &grads, cfg)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Trailing moving average used to judge loss trends.
pub fn smooth_trace(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            trace[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
