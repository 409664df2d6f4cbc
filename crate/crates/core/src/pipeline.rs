//! End-to-end try-on: render test views, edit them in multi-view batches,
//! restore face and hair, fit a Gaussian cloud with outlier-view
//! rejection, and evaluate on a turntable.

use serde::{Deserialize, Serialize};

use crate::camera::{uniform_rig, ViewRig};
use crate::diffusion::{
    ddim_sample, train, AdamState, ConditioningBundle, DenoiserConfig, Stage, ToyDenoiser, TrainConfig,
    TrainingSubject,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{classify_views, clip_cons, dino_sim, EmbeddingProvider, ToyEmbedder, TURNTABLE_VIEWS};
use crate::splat::{fit_cloud, render, FitConfig, Gaussian, GaussianCloud, SplatConfig};
use crate::synthdata::{render_scene, BodyScene, DatasetItem, GarmentPair, SceneViews, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Uniform views rendered, edited and reconstructed.
    pub test_views: usize,
    /// Views denoised jointly per batch.
    pub batch_size: usize,
    /// Views per item in multi-view training.
    pub train_views: usize,
    pub ddim_steps: usize,
    /// Views whose fitting-loss z-score exceeds this are discarded.
    pub z_threshold: f64,
    /// Turntable size used for evaluation.
    pub eval_views: usize,
    pub seed: u64,
    pub init_gaussians: usize,
    pub init_scale: f64,
    pub init_opacity: f64,
    /// Fit of the source cloud to the original views.
    pub source_fit: FitConfig,
    /// Warm-started fits to the edited views.
    pub edit_fit: FitConfig,
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub synth: SynthConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    /// Training steps of the single-view stage.
    pub single_view_steps: usize,
    /// Training steps of the multi-view stage.
    pub multi_view_steps: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let splat = SplatConfig {
            min_weight: 1e-6,
            ..SplatConfig::default()
        };
        Self {
            test_views: 32,
            batch_size: 16,
            train_views: 8,
            ddim_steps: 20,
            z_threshold: 1.5,
            eval_views: TURNTABLE_VIEWS,
            seed: 0,
            init_gaussians: 600,
            init_scale: 0.04,
            init_opacity: 0.8,
            source_fit: FitConfig {
                iters: 300,
                lr: 0.01,
                splat,
                max_scale: 0.1,
                ..FitConfig::default()
            },
            edit_fit: FitConfig {
                iters: 150,
                lr: 0.005,
                splat,
                max_scale: 0.1,
                ..FitConfig::default()
            },
            embed_dim: ToyEmbedder::DEFAULT_DIM,
            embed_seed: 0,
            synth: SynthConfig {
                width: 32,
                height: 48,
                ..SynthConfig::default()
            },
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            single_view_steps: 200,
            multi_view_steps: 200,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_views < 2 || self.batch_size == 0 || self.test_views % self.batch_size != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} test views cannot be split into batches of {}",
                self.test_views, self.batch_size
            )));
        }
        if !(self.z_threshold > 0.0) {
            return Err(Error::InvalidParameter(format!("z threshold {}", self.z_threshold)));
        }
        let (w, h) = self.model.image_size();
        if (w, h) != (self.synth.width, self.synth.height) {
            return Err(Error::InvalidParameter(format!(
                "model expects {w}x{h} images but views are {}x{}",
                self.synth.width, self.synth.height
            )));
        }
        self.model.validate()?;
        if self.ddim_steps == 0 || self.ddim_steps > self.model.timesteps || self.train_views == 0 || self.eval_views < 2 || self.embed_dim == 0 {
            return Err(Error::InvalidParameter("zero-sized pipeline setting".into()));
        }
        Ok(())
    }

    pub fn test_rig(&self) -> Result<ViewRig> {
        uniform_rig(self.synth.intrinsics()?, self.test_views, self.synth.camera_distance, self.synth.elevation)
    }

    pub fn turntable_rig(&self, n: usize) -> Result<ViewRig> {
        uniform_rig(self.synth.intrinsics()?, n, self.synth.camera_distance, self.synth.elevation)
    }

    pub fn embedder(&self) -> Result<ToyEmbedder> {
        ToyEmbedder::new(self.embed_dim, self.embed_seed)
    }
}

/// Supervision for the try-on task: condition on the subject's normals and
/// agnostic views plus the target garment, predict the subject wearing it.
pub fn training_subject(item: &DatasetItem) -> TrainingSubject {
    TrainingSubject {
        rig: item.views.rig.clone(),
        garment_front: item.target_garment.front.clone(),
        garment_back: item.target_garment.back.clone(),
        normals: item.views.normals(),
        agnostic: item.views.agnostic(),
        targets: item.target_rgb.clone(),
    }
}

/// Single-view stage then multi-view stage. Progress is read from
/// `state.step`, so a run resumed from a saved state finishes the
/// remaining steps of whichever stage it stopped in.
pub fn train_two_stage(
    model: &mut ToyDenoiser,
    state: &mut AdamState,
    subjects: &[TrainingSubject],
    cfg: &PipelineConfig,
) -> Result<Vec<f64>> {
    let s1 = cfg.single_view_steps as u64;
    let total = s1 + cfg.multi_view_steps as u64;
    let base = TrainConfig {
        views: cfg.train_views,
        ..cfg.train
    };
    let mut trace = Vec::new();
    if state.step < s1 {
        let c = TrainConfig {
            steps: (s1 - state.step) as usize,
            ..base
        };
        trace.extend(train(model, state, subjects, Stage::SingleView, &c)?);
    }
    if state.step < total {
        let c = TrainConfig {
            steps: (total - state.step) as usize,
            ..base
        };
        trace.extend(train(model, state, subjects, Stage::MultiView, &c)?);
    }
    Ok(trace)
}

/// Produces edited images for a set of rendered views.
pub trait ViewEditor {
    fn edit(&self, views: &SceneViews, garment: &GarmentPair, cfg: &PipelineConfig) -> Result<Vec<Image>>;
}

/// Returns the original renders unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEditor;

impl ViewEditor for IdentityEditor {
    fn edit(&self, views: &SceneViews, _: &GarmentPair, _: &PipelineConfig) -> Result<Vec<Image>> {
        Ok(views.rgb())
    }
}

/// Multi-view diffusion editing with the toy denoiser.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionEditor<'a> {
    pub model: &'a ToyDenoiser,
}

impl ViewEditor for DiffusionEditor<'_> {
    fn edit(&self, views: &SceneViews, garment: &GarmentPair, cfg: &PipelineConfig) -> Result<Vec<Image>> {
        edit_views(self.model, views, garment, cfg)
    }
}

/// Consecutive index ranges of at most `batch` views, in rig order.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(batch.max(1)))
        .map(|b| b * batch..((b + 1) * batch).min(n))
        .collect()
}

/// Edits the views in batches of `cfg.batch_size`; each batch is sampled
/// jointly with its own correlation matrix. The starting noise of view `i`
/// is keyed by `(cfg.seed, i)` so batches share one noise field.
pub fn edit_views(
    model: &ToyDenoiser,
    views: &SceneViews,
    garment: &GarmentPair,
    cfg: &PipelineConfig,
) -> Result<Vec<Image>> {
    let mc = model.config();
    let n = views.views.len();
    if n != views.rig.view_count() {
        return Err(Error::Dimension("views and rig disagree".into()));
    }
    let (w, h) = mc.image_size();
    if garment.front.dims() != (w, h, mc.image_channels) {
        return Err(Error::Shape(format!(
            "model expects {w}x{h} images, garment is {:?}",
            garment.front.dims()
        )));
    }
    let ae = model.autoencoder();
    let normals = views.normals();
    let agnostic = views.agnostic();
    let mut out = Vec::with_capacity(n);
    for range in batch_ranges(n, cfg.batch_size) {
        let rig = views.rig.slice(range.start, range.len())?;
        let cond = ConditioningBundle::from_images(
            &ae,
            &garment.front,
            &garment.back,
            &normals[range.clone()],
            &agnostic[range.clone()],
            &rig,
            mc.frequencies,
            mc.correlation,
        )?;
        let ids: Vec<u64> = range.clone().map(|i| i as u64).collect();
        let latents = ddim_sample(model, model.schedule(), &cond, cfg.ddim_steps, cfg.seed, &ids)?;
        for z in &latents {
            let mut img = ae.decode(z)?;
            img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            out.push(img);
        }
    }
    Ok(out)
}

/// `(1 − m)·edited + m·original`, with a one-channel mask broadcast over
/// the colour channels.
pub fn composite_preserve(edited: &Image, original: &Image, mask: &Image) -> Result<Image> {
    if !edited.same_dims(original) {
        return Err(Error::Shape(format!("edited {:?} vs original {:?}", edited.dims(), original.dims())));
    }
    let (w, h, c) = edited.dims();
    if mask.dims() != (w, h, 1) && mask.dims() != (w, h, c) {
        return Err(Error::Shape(format!("mask {:?} for a {w}x{h} image", mask.dims())));
    }
    let mut out = edited.clone();
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let m = mask.get(x, y, if mask.channels() == 1 { 0 } else { k });
                if !(0.0..=1.0).contains(&m) {
                    return Err(Error::InvalidParameter(format!("mask value {m}")));
                }
                out.set(x, y, k, (1.0 - m) * edited.get(x, y, k) + m * original.get(x, y, k));
            }
        }
    }
    Ok(out)
}

/// Indices (ascending) of views kept after discarding those whose loss
/// z-score is strictly above `threshold`. With zero spread all views are
/// kept; at least two views always survive (the lowest-loss ones).
pub fn zscore_filter(losses: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if losses.len() < 2 {
        return Err(Error::InvalidParameter("z-score filtering needs at least two views".into()));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::InvalidParameter("non-finite view loss".into()));
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let sd = (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        return Ok((0..losses.len()).collect());
    }
    let kept: Vec<usize> = (0..losses.len())
        .filter(|&i| (losses[i] - mean) / sd <= threshold)
        .collect();
    if kept.len() >= 2 {
        return Ok(kept);
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut best = order[..2].to_vec();
    best.sort();
    Ok(best)
}

/// Isotropic grey Gaussians on the body surface, the fitting start point.
pub fn initial_cloud(scene: &BodyScene, cfg: &PipelineConfig) -> Result<GaussianCloud> {
    let gaussians = scene
        .surface_samples(cfg.init_gaussians, cfg.seed)
        .into_iter()
        .map(|(p, _)| Gaussian::isotropic(p, cfg.init_scale, cfg.init_opacity, [0.5; 3]))
        .collect::<Result<_>>()?;
    GaussianCloud::new(gaussians)
}

fn targets(images: &[Image], rig: &ViewRig, keep: &[usize]) -> Vec<(Image, crate::camera::Camera)> {
    keep.iter().map(|&i| (images[i].clone(), *rig.camera(i))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub cloud: GaussianCloud,
    pub kept: Vec<usize>,
    /// Per-view losses of the first fit to all edited views.
    pub first_losses: Vec<f64>,
    /// Per-view losses of the final cloud on the kept views.
    pub final_losses: Vec<f64>,
}

/// Fits the source cloud to the original renders.
pub fn fit_source(original: &[Image], rig: &ViewRig, init: &GaussianCloud, cfg: &PipelineConfig) -> Result<GaussianCloud> {
    if original.len() != rig.view_count() {
        return Err(Error::Dimension(format!("{} views for {} cameras", original.len(), rig.view_count())));
    }
    let all: Vec<usize> = (0..original.len()).collect();
    Ok(fit_cloud(&targets(original, rig, &all), init, &cfg.source_fit)?.cloud)
}

/// Warm-started fit to all edited views, z-score rejection, then a refit
/// from the source cloud on the kept views.
pub fn reconstruct(source: &GaussianCloud, edited: &[Image], rig: &ViewRig, cfg: &PipelineConfig) -> Result<Reconstruction> {
    if edited.len() != rig.view_count() {
        return Err(Error::Dimension(format!("{} edited views for {} cameras", edited.len(), rig.view_count())));
    }
    let all: Vec<usize> = (0..edited.len()).collect();
    let first = fit_cloud(&targets(edited, rig, &all), source, &cfg.edit_fit)?;
    let kept = zscore_filter(&first.view_losses, cfg.z_threshold)?;
    let (cloud, final_losses) = if kept.len() == edited.len() {
        (first.cloud, first.view_losses.clone())
    } else {
        let refit = fit_cloud(&targets(edited, rig, &kept), source, &cfg.edit_fit)?;
        (refit.cloud, refit.view_losses)
    };
    Ok(Reconstruction {
        cloud,
        kept,
        first_losses: first.view_losses,
        final_losses,
    })
}

pub fn render_turntable(cloud: &GaussianCloud, rig: &ViewRig, splat: &SplatConfig) -> Result<Vec<Image>> {
    rig.cameras()
        .iter()
        .map(|c| render(cloud, c, splat).map(|o| o.image))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub clip_cons: f64,
    /// Only defined on the 120-view protocol.
    pub dino_sim: Option<f64>,
}

/// Metrics on `cfg.eval_views` turntable renders of the edited cloud
/// against the source cloud. The garment similarity needs the garment
/// images and the 120-view protocol.
pub fn evaluate(
    source: &GaussianCloud,
    edited: &GaussianCloud,
    garment: Option<&GarmentPair>,
    cfg: &PipelineConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Metrics> {
    let rig = cfg.turntable_rig(cfg.eval_views)?;
    let splat = cfg.edit_fit.splat;
    let e = render_turntable(edited, &rig, &splat)?;
    let o = render_turntable(source, &rig, &splat)?;
    let dino = match garment {
        Some(g) if cfg.eval_views == TURNTABLE_VIEWS => {
            Some(dino_sim(&g.front, &g.back, &e, &classify_views(&rig)?, provider)?)
        }
        _ => None,
    };
    Ok(Metrics {
        clip_cons: clip_cons(&e, &o, provider)?,
        dino_sim: dino,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub clip_cons: f64,
    pub dino_sim: Option<f64>,
    pub kept_views: Vec<usize>,
    pub discarded_views: Vec<usize>,
    pub first_fit_losses: Vec<f64>,
    pub final_fit_losses: Vec<f64>,
    pub config: PipelineConfig,
}

impl Report {
    pub fn new(metrics: Metrics, rec: &Reconstruction, cfg: &PipelineConfig) -> Self {
        let discarded = (0..rec.first_losses.len()).filter(|i| !rec.kept.contains(i)).collect();
        Self {
            clip_cons: metrics.clip_cons,
            dino_sim: metrics.dino_sim,
            kept_views: rec.kept.clone(),
            discarded_views: discarded,
            first_fit_losses: rec.first_losses.clone(),
            final_fit_losses: rec.final_losses.clone(),
            config: *cfg,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub original: SceneViews,
    /// Edited views after face/hair compositing.
    pub edited: Vec<Image>,
    pub source_cloud: GaussianCloud,
    pub reconstruction: Reconstruction,
    pub metrics: Metrics,
    pub report: Report,
}

/// Renders the test views, edits them, restores face and hair, fits the
/// source and edited clouds and evaluates. `source` reuses an already
/// fitted source cloud.
pub fn run_vton(
    scene: &BodyScene,
    garment: &GarmentPair,
    editor: &dyn ViewEditor,
    cfg: &PipelineConfig,
    provider: &dyn EmbeddingProvider,
    source: Option<&GaussianCloud>,
) -> Result<EditResult> {
    cfg.validate()?;
    let original = render_scene(scene, &cfg.test_rig()?, &cfg.synth.render)?;
    let raw = editor.edit(&original, garment, cfg)?;
    if raw.len() != original.views.len() {
        return Err(Error::Dimension("editor returned a different view count".into()));
    }
    let edited = raw
        .iter()
        .zip(&original.views)
        .map(|(e, o)| composite_preserve(e, &o.rgb, &o.face_mask))
        .collect::<Result<Vec<_>>>()?;
    let source_cloud = match source {
        Some(c) => c.clone(),
        None => fit_source(&original.rgb(), &original.rig, &initial_cloud(scene, cfg)?, cfg)?,
    };
    let reconstruction = reconstruct(&source_cloud, &edited, &original.rig, cfg)?;
    let metrics = evaluate(&source_cloud, &reconstruction.cloud, Some(garment), cfg, provider)?;
    let report = Report::new(metrics, &reconstruction, cfg);
    Ok(EditResult {
        original,
        edited,
        source_cloud,
        reconstruction,
        metrics,
        report,
    })
}
