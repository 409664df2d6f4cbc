//! The toy ε-prediction network.
//!
//! Each view is a sequence of latent-pixel tokens whose input features are
//! the channel concatenation `(zₜ, pose latent, agnostic latent)`. A stack
//! of blocks refines the tokens:
//!
//! ```text
//! a  = X·W_in + b_in
//! h  = a + MVAttention(a; garment features, C)
//! k  = h + CrossAttention(h; Yᵢ)              (per view)
//! X' = X + tanh(k)·W_out + b_out
//! ```
//!
//! Garment features for block `l` come from running the same trunk on the
//! garment latents at `t = 0` (no cross-attention, self-attention only) and
//! taking that pass's `a` at block `l`. `Yᵢ` is the projected garment tokens
//! followed by one MLP-projected camera-rotation token.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::camera::{
    build_correlation_matrix, encode_camera_rotation, CameraToken, CorrelationMatrix, ViewRig,
};
use crate::diffusion::{LatentImage, NoiseSchedule, ToyAutoencoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Mat;

/// How the multi-view attention correlation is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// `Cᵢⱼ` from the camera rotations.
    Rotation,
    /// `C = I` (the ablation).
    Identity,
}

impl CorrelationMode {
    pub fn matrix(self, rig: &ViewRig) -> Result<CorrelationMatrix> {
        match self {
            CorrelationMode::Rotation => build_correlation_matrix(rig),
            CorrelationMode::Identity => Ok(CorrelationMatrix::identity(rig.view_count())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub patch: usize,
    pub image_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Token feature width.
    pub width: usize,
    /// Query/key dimension of both attention layers.
    pub head_dim: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// Camera encoding length `L`.
    pub frequencies: usize,
    pub timesteps: usize,
    pub correlation: CorrelationMode,
}

/// Sized for 32×48 RGB images.
impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            image_channels: 3,
            latent_height: 12,
            latent_width: 8,
            width: 32,
            head_dim: 16,
            blocks: 2,
            mlp_hidden: 32,
            frequencies: 4,
            timesteps: 1000,
            correlation: CorrelationMode::Rotation,
        }
    }
}

impl DenoiserConfig {
    pub fn latent_channels(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    pub fn tokens(&self) -> usize {
        self.latent_height * self.latent_width
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.latent_width * self.patch, self.latent_height * self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.patch,
            self.image_channels,
            self.latent_height,
            self.latent_width,
            self.width,
            self.head_dim,
            self.mlp_hidden,
            self.frequencies,
            self.timesteps,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidParameter(format!("zero-sized denoiser config {self:?}")));
        }
        Ok(())
    }

    /// Parameter names with shapes, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let lc = self.latent_channels();
        let d = self.width;
        let mut shapes = vec![
            ("camera_mlp.b1".to_string(), (1, self.mlp_hidden)),
            ("camera_mlp.b2".to_string(), (1, d)),
            ("camera_mlp.w1".to_string(), (18 * self.frequencies, self.mlp_hidden)),
            ("camera_mlp.w2".to_string(), (self.mlp_hidden, d)),
            ("embed.b".to_string(), (1, d)),
            ("embed.w".to_string(), (3 * lc, d)),
            ("garment.b".to_string(), (1, d)),
            ("garment.w".to_string(), (lc, d)),
            ("head.b".to_string(), (1, lc)),
            ("head.w".to_string(), (d, lc)),
            ("pos.table".to_string(), (self.tokens(), d)),
            ("pose.b".to_string(), (1, lc)),
            ("pose.w".to_string(), (lc, lc)),
            ("time.table".to_string(), (self.timesteps, d)),
        ];
        for l in 0..self.blocks {
            let p = |s: &str| format!("block{l}.{s}");
            shapes.extend([
                (p("cross.wk"), (d, self.head_dim)),
                (p("cross.wq"), (d, self.head_dim)),
                (p("cross.wv"), (d, d)),
                (p("in.b"), (1, d)),
                (p("in.w"), (d, d)),
                (p("mv.wk"), (d, self.head_dim)),
                (p("mv.wq"), (d, self.head_dim)),
                (p("mv.wv"), (d, d)),
                (p("out.b"), (1, d)),
                (p("out.w"), (d, d)),
            ]);
        }
        shapes.sort();
        shapes
    }
}

/// Pose encoder: space-to-depth patches of the normal map followed by one
/// affine map per latent channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEncoderParams {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

pub fn encode_pose(
    normal_map: &Image,
    autoencoder: &ToyAutoencoder,
    params: &PoseEncoderParams,
) -> Result<LatentImage> {
    let patches = autoencoder.encode(normal_map)?;
    let out = patches
        .tokens()
        .matmul(&params.weight)?
        .add_row(&params.bias)?;
    LatentImage::from_tokens(patches.height(), patches.width(), out)
}

/// Everything the denoiser is conditioned on for one multi-view item.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub garment_front: LatentImage,
    pub garment_back: LatentImage,
    /// Space-to-depth patches of each view's normal map; the pose encoder's
    /// affine map is applied inside the model.
    pub normal_patches: Vec<LatentImage>,
    pub agnostic: Vec<LatentImage>,
    pub camera_tokens: Vec<CameraToken>,
    pub correlation: CorrelationMatrix,
}

impl ConditioningBundle {
    pub fn view_count(&self) -> usize {
        self.normal_patches.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.normal_patches.len();
        if m == 0 {
            return Err(Error::Empty("conditioning bundle has no views".into()));
        }
        if self.agnostic.len() != m || self.camera_tokens.len() != m || self.correlation.size() != m {
            return Err(Error::Dimension(format!(
                "view counts disagree: normals {m}, agnostic {}, cameras {}, correlation {}",
                self.agnostic.len(),
                self.camera_tokens.len(),
                self.correlation.size()
            )));
        }
        Ok(())
    }

    /// Builds the bundle from images and cameras.
    #[allow(clippy::too_many_arguments)]
    pub fn from_images(
        autoencoder: &ToyAutoencoder,
        garment_front: &Image,
        garment_back: &Image,
        normals: &[Image],
        agnostic: &[Image],
        rig: &ViewRig,
        frequencies: usize,
        mode: CorrelationMode,
    ) -> Result<Self> {
        let bundle = Self {
            garment_front: autoencoder.encode(garment_front)?,
            garment_back: autoencoder.encode(garment_back)?,
            normal_patches: normals
                .iter()
                .map(|n| autoencoder.encode(n))
                .collect::<Result<_>>()?,
            agnostic: agnostic
                .iter()
                .map(|a| autoencoder.encode(a))
                .collect::<Result<_>>()?,
            camera_tokens: rig
                .cameras()
                .iter()
                .map(|c| encode_camera_rotation(c.extrinsics.rotation(), frequencies))
                .collect::<Result<_>>()?,
            correlation: mode.matrix(rig)?,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// The bundle restricted to the listed views.
    pub fn select(&self, views: &[usize], correlation: CorrelationMatrix) -> Result<Self> {
        let pick = |i: &usize| -> Result<usize> {
            if *i < self.view_count() {
                Ok(*i)
            } else {
                Err(Error::InvalidParameter(format!("view {i} out of range")))
            }
        };
        let idx = views.iter().map(pick).collect::<Result<Vec<_>>>()?;
        let out = Self {
            garment_front: self.garment_front.clone(),
            garment_back: self.garment_back.clone(),
            normal_patches: idx.iter().map(|&i| self.normal_patches[i].clone()).collect(),
            agnostic: idx.iter().map(|&i| self.agnostic[i].clone()).collect(),
            camera_tokens: idx.iter().map(|&i| self.camera_tokens[i].clone()).collect(),
            correlation,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Anything that predicts the noise of a jointly denoised set of views.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        z_t: &[LatentImage],
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<Vec<LatentImage>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    params: BTreeMap<String, Mat>,
    schedule: NoiseSchedule,
}

/// Tape handles of every parameter, keyed by name.
pub type ParamVars = BTreeMap<String, Var>;

impl ToyDenoiser {
    /// Random initialisation: weights `N(0, 1/fan_in)`, biases zero,
    /// embedding tables `N(0, 0.1²)`. Parameters are drawn in name order.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, (rows, cols)) in config.parameter_shapes() {
            let m = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                Mat::zeros(rows, cols)
            } else {
                let std = if name.ends_with(".table") {
                    0.1
                } else if name.starts_with("head") || name.ends_with("out.w") {
                    0.5 / (rows as f64).sqrt()
                } else {
                    1.0 / (rows as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                Mat::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
            };
            params.insert(name, m);
        }
        Ok(Self {
            schedule: NoiseSchedule::cosine(config.timesteps)?,
            config,
            params,
        })
    }

    pub fn from_parts(config: DenoiserConfig, params: BTreeMap<String, Mat>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in config.parameter_shapes() {
            match params.get(&name) {
                Some(m) if m.shape() == shape => {}
                Some(m) => {
                    return Err(Error::Dimension(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        m.shape()
                    )))
                }
                None => return Err(Error::InvalidParameter(format!("missing parameter {name}"))),
            }
        }
        if params.len() != config.parameter_shapes().len() {
            return Err(Error::InvalidParameter("unexpected extra parameters".into()));
        }
        Ok(Self {
            schedule: NoiseSchedule::cosine(config.timesteps)?,
            config,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Mat> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Mat {
        &self.params[name]
    }

    pub fn autoencoder(&self) -> ToyAutoencoder {
        ToyAutoencoder::new(self.config.patch).expect("validated patch size")
    }

    pub fn pose_encoder(&self) -> PoseEncoderParams {
        PoseEncoderParams {
            weight: self.params["pose.w"].clone(),
            bias: self.params["pose.b"].row(0).to_vec(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|m| m.data().len()).sum()
    }

    pub fn load_params(&self, tape: &mut Tape) -> ParamVars {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect()
    }

    fn check_inputs(&self, z_t: &[LatentImage], t: usize, cond: &ConditioningBundle) -> Result<()> {
        cond.validate()?;
        self.schedule.check_step(t)?;
        let want = (
            self.config.latent_channels(),
            self.config.latent_height,
            self.config.latent_width,
        );
        if z_t.len() != cond.view_count() {
            return Err(Error::Dimension(format!(
                "{} noisy latents for {} conditioned views",
                z_t.len(),
                cond.view_count()
            )));
        }
        let latents = z_t
            .iter()
            .chain(&cond.normal_patches)
            .chain(&cond.agnostic)
            .chain([&cond.garment_front, &cond.garment_back]);
        for l in latents {
            if l.dims() != want {
                return Err(Error::Shape(format!("latent {:?}, model expects {want:?}", l.dims())));
            }
        }
        for tok in &cond.camera_tokens {
            if tok.len() != 18 * self.config.frequencies {
                return Err(Error::Dimension(format!(
                    "camera token of length {}, model expects {}",
                    tok.len(),
                    18 * self.config.frequencies
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the stacked noise
    /// prediction, `(m·n) × latent_channels`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        z_t: &[LatentImage],
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<Var> {
        self.check_inputs(z_t, t, cond)?;
        let m = z_t.len();
        let n = self.config.tokens();
        let lc = self.config.latent_channels();
        let w = |name: &str| p[name];

        // Token inputs, channel order (zₜ, pose, agnostic).
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let z = tape.leaf(z_t[i].tokens().clone());
            let normal = tape.leaf(cond.normal_patches[i].tokens().clone());
            let pose = tape.affine(normal, w("pose.w"), w("pose.b"))?;
            let agnostic = tape.leaf(cond.agnostic[i].tokens().clone());
            rows.push(tape.hstack(&[z, pose, agnostic])?);
        }
        let x = tape.vstack(&rows)?;
        let h = tape.affine(x, w("embed.w"), w("embed.b"))?;
        let temb = tape.gather_row(w("time.table"), t)?;
        let h = tape.add_row(h, temb)?;
        let pos = tape.tile_rows(w("pos.table"), m)?;
        let mut h = tape.add(h, pos)?;

        // Garment trunk inputs at t = 0; zt-slot holds the garment latent.
        let zeros = Mat::zeros(n, lc);
        let mut garment_h = Vec::with_capacity(2);
        let mut garment_proj = Vec::with_capacity(2);
        for g in [&cond.garment_front, &cond.garment_back] {
            let gl = tape.leaf(g.tokens().clone());
            let pad = tape.leaf(zeros.clone());
            let xg = tape.hstack(&[gl, pad, pad])?;
            let hg = tape.affine(xg, w("embed.w"), w("embed.b"))?;
            let t0 = tape.gather_row(w("time.table"), 0)?;
            let hg = tape.add_row(hg, t0)?;
            garment_h.push(tape.add(hg, w("pos.table"))?);
            garment_proj.push(tape.affine(gl, w("garment.w"), w("garment.b"))?);
        }
        let garment_embed = tape.vstack(&garment_proj)?;

        // Yᵢ = F_g ⊕ MLP(camera token)
        let mut conditions = Vec::with_capacity(m);
        for tok in &cond.camera_tokens {
            let c = tape.leaf(Mat::from_vec(1, tok.len(), tok.values().to_vec())?);
            let hidden = tape.affine(c, w("camera_mlp.w1"), w("camera_mlp.b1"))?;
            let hidden = tape.tanh(hidden);
            let cam = tape.affine(hidden, w("camera_mlp.w2"), w("camera_mlp.b2"))?;
            conditions.push(tape.vstack(&[garment_embed, cam])?);
        }

        let self_corr = CorrelationMatrix::identity(1);
        for l in 0..self.config.blocks {
            let name = |s: &str| format!("block{l}.{s}");
            let (in_w, in_b) = (w(&name("in.w")), w(&name("in.b")));
            let (out_w, out_b) = (w(&name("out.w")), w(&name("out.b")));
            let (mq, mk, mv) = (w(&name("mv.wq")), w(&name("mv.wk")), w(&name("mv.wv")));
            let (cq, ck, cv) = (w(&name("cross.wq")), w(&name("cross.wk")), w(&name("cross.wv")));

            let a = tape.affine(h, in_w, in_b)?;
            let ag: Vec<Var> = garment_h
                .iter()
                .map(|g| tape.affine(*g, in_w, in_b))
                .collect::<Result<_>>()?;
            let attn = tape.mv_attention(a, m, Some(ag[0]), Some(ag[1]), &cond.correlation, mq, mk, mv)?;
            let hh = tape.add(a, attn)?;
            let mut per_view = Vec::with_capacity(m);
            for (i, y) in conditions.iter().enumerate() {
                let hv = tape.slice_rows(hh, i * n, n)?;
                let ca = tape.cross_attention(hv, *y, cq, ck, cv)?;
                per_view.push(tape.add(hv, ca)?);
            }
            let k = tape.vstack(&per_view)?;
            let k = tape.tanh(k);
            let update = tape.affine(k, out_w, out_b)?;
            h = tape.add(h, update)?;

            if l + 1 < self.config.blocks {
                for (slot, a_g) in garment_h.iter_mut().zip(&ag) {
                    let s = tape.mv_attention(*a_g, 1, None, None, &self_corr, mq, mk, mv)?;
                    let hg = tape.add(*a_g, s)?;
                    let hg = tape.tanh(hg);
                    let upd = tape.affine(hg, out_w, out_b)?;
                    *slot = tape.add(*slot, upd)?;
                }
            }
        }
        tape.affine(h, w("head.w"), w("head.b"))
    }

    fn split_views(&self, stacked: &Mat, m: usize) -> Result<Vec<LatentImage>> {
        let n = self.config.tokens();
        (0..m)
            .map(|i| {
                LatentImage::from_tokens(
                    self.config.latent_height,
                    self.config.latent_width,
                    stacked.slice_rows(i * n, n)?,
                )
            })
            .collect()
    }

    /// Loss and parameter gradients for a batch of items (mean of per-item MSE).
    pub fn loss_and_grads(&self, items: &[LossItem]) -> Result<(f64, BTreeMap<String, Mat>)> {
        if items.is_empty() {
            return Err(Error::Empty("loss over an empty batch".into()));
        }
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Mat> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Mat::zeros(v.rows(), v.cols())))
            .collect();
        let weight = 1.0 / items.len() as f64;
        for item in items {
            let mut tape = Tape::new();
            let p = self.load_params(&mut tape);
            let (loss, g) = self.item_loss(&mut tape, &p, item)?;
            total += loss * weight;
            for (name, var) in &p {
                if let Some(d) = g.get(*var) {
                    grads
                        .get_mut(name)
                        .expect("same parameter set")
                        .add_assign(&d.scale(weight))?;
                }
            }
        }
        Ok((total, grads))
    }

    fn item_loss(&self, tape: &mut Tape, p: &ParamVars, item: &LossItem) -> Result<(f64, Gradients)> {
        let z_t = item.noisy_latents(&self.schedule)?;
        let pred = self.forward(tape, p, &z_t, item.t, &item.cond)?;
        let eps: Vec<&Mat> = item.eps.iter().map(LatentImage::tokens).collect();
        let loss = tape.mse(pred, Mat::vstack(&eps)?)?;
        let value = tape.value(loss).get(0, 0);
        Ok((value, tape.backward(loss)?))
    }
}

impl NoisePredictor for ToyDenoiser {
    fn predict_noise(
        &self,
        z_t: &[LatentImage],
        t: usize,
        cond: &ConditioningBundle,
    ) -> Result<Vec<LatentImage>> {
        let mut tape = Tape::new();
        let p = self.load_params(&mut tape);
        let out = self.forward(&mut tape, &p, z_t, t, cond)?;
        self.split_views(tape.value(out), z_t.len())
    }
}

/// One training item: clean latents of `m` views, their noise, a shared
/// timestep and the conditioning.
#[derive(Debug, Clone)]
pub struct LossItem {
    pub cond: ConditioningBundle,
    pub z0: Vec<LatentImage>,
    pub eps: Vec<LatentImage>,
    pub t: usize,
}

impl LossItem {
    pub fn noisy_latents(&self, schedule: &NoiseSchedule) -> Result<Vec<LatentImage>> {
        if self.z0.len() != self.eps.len() {
            return Err(Error::Dimension("z0 and eps view counts differ".into()));
        }
        self.z0
            .iter()
            .zip(&self.eps)
            .map(|(z, e)| crate::diffusion::forward_noising(z, self.t, e, schedule))
            .collect()
    }
}

/// Mean over items of the mean squared error between the true and predicted
/// noise, with `zₜ = αₜz₀ + σₜε`.
pub fn ldm_loss<P: NoisePredictor>(model: &P, schedule: &NoiseSchedule, items: &[LossItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for item in items {
        let z_t = item.noisy_latents(schedule)?;
        let pred = model.predict_noise(&z_t, item.t, &item.cond)?;
        if pred.len() != item.eps.len() {
            return Err(Error::Dimension("prediction view count differs from eps".into()));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (p, e) in pred.iter().zip(&item.eps) {
            if p.dims() != e.dims() {
                return Err(Error::Shape(format!("prediction {:?} vs eps {:?}", p.dims(), e.dims())));
            }
            for (a, b) in p.tokens().data().iter().zip(e.tokens().data()) {
                sum += (a - b) * (a - b);
            }
            count += p.tokens().data().len();
        }
        total += sum / count as f64;
    }
    Ok(total / items.len() as f64)
}
