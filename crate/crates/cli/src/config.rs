//! Effective configuration: defaults, then the JSON file, then `--set`
//! overrides, then dedicated flags.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use mvedit::pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    /// Subjects written by `synth`.
    pub subjects: usize,
    /// Cameras per synthesized subject.
    pub views: usize,
    /// Frames written by `turntable`.
    pub turntable_frames: usize,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            subjects: 4,
            views: 8,
            turntable_frames: 120,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Every accepted key with a one-line description; printed by `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("subjects", "subjects written by synth"),
    ("views", "cameras per synthesized subject"),
    ("turntable_frames", "frames written by turntable"),
    ("seed", "global seed: scene ids, model init, sampling noise"),
    ("test_views", "uniform views rendered and edited per subject"),
    ("batch_size", "views denoised jointly (must divide test_views)"),
    ("train_views", "views per item in the multi-view training stage"),
    ("ddim_steps", "DDIM sampling steps"),
    ("z_threshold", "views with fitting-loss z-score above this are discarded"),
    ("eval_views", "turntable views used by eval (120 enables dino_sim)"),
    ("init_gaussians", "Gaussians sampled on the body surface before fitting"),
    ("init_scale", "initial Gaussian scale"),
    ("init_opacity", "initial Gaussian opacity"),
    ("source_fit.iters", "Adam iterations fitting the source cloud"),
    ("source_fit.lr", "source fit learning rate"),
    ("source_fit.seed", "source fit view-sampling seed"),
    ("source_fit.views_per_iter", "views per source fit iteration (0 = all)"),
    ("source_fit.min_scale", "lower clamp on Gaussian scales"),
    ("source_fit.max_scale", "upper clamp on Gaussian scales"),
    ("source_fit.beta1", "Adam first-moment decay"),
    ("source_fit.beta2", "Adam second-moment decay"),
    ("source_fit.splat.lambda_blur", "screen-space blur added to projected covariances"),
    ("source_fit.splat.near", "near plane; Gaussians closer are culled"),
    ("source_fit.splat.min_weight", "Gaussian falloff below which a pixel is skipped"),
    ("edit_fit.*", "same keys as source_fit, for fits to the edited views"),
    ("embed_dim", "toy embedder dimension"),
    ("embed_seed", "toy embedder projection seed"),
    ("synth.width", "image width in pixels"),
    ("synth.height", "image height in pixels"),
    ("synth.camera_distance", "camera orbit radius"),
    ("synth.elevation", "camera elevation in radians"),
    ("synth.half_extent", "world half-height framed by the cameras"),
    ("synth.render.dilation", "agnostic mask dilation radius in pixels"),
    ("synth.render.agnostic_fill", "gray level of the agnostic region"),
    ("synth.render.ambient", "ambient shading term"),
    ("synth.render.diffuse", "diffuse shading weight"),
    ("synth.render.light", "light direction [x, y, z]"),
    ("synth.render.max_steps", "sphere-tracing step limit"),
    ("synth.render.hit_epsilon", "sphere-tracing hit distance"),
    ("synth.render.max_distance", "sphere-tracing far limit"),
    ("model.patch", "autoencoder patch size"),
    ("model.image_channels", "image channels"),
    ("model.latent_height", "latent rows (synth.height / patch)"),
    ("model.latent_width", "latent columns (synth.width / patch)"),
    ("model.width", "token feature width"),
    ("model.head_dim", "attention query/key dimension"),
    ("model.blocks", "denoiser blocks"),
    ("model.mlp_hidden", "camera-token MLP hidden width"),
    ("model.frequencies", "camera positional-encoding frequencies"),
    ("model.timesteps", "diffusion timesteps"),
    ("model.correlation", "\"rotation\" (multi-view attention) or \"identity\""),
    ("train.steps", "unused by the CLI; see single_view_steps and multi_view_steps"),
    ("train.lr", "Adam learning rate"),
    ("train.batch_size", "items per step"),
    ("train.views", "overridden by train_views"),
    ("train.beta1", "Adam first-moment decay"),
    ("train.beta2", "Adam second-moment decay"),
    ("train.epsilon", "Adam epsilon"),
    ("train.clip_norm", "global gradient-norm clip (<= 0 disables)"),
    ("train.seed", "training item stream seed"),
    ("single_view_steps", "steps of the single-view training stage"),
    ("multi_view_steps", "steps of the multi-view training stage"),
];

pub fn help_text() -> String {
    let mut s = String::from(
        "Configuration keys (JSON file via --config, or --set key=value with dotted keys):\n",
    );
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<32} {d}\n"));
    }
    s
}

/// Rejects keys that the default configuration does not have.
fn check_keys(given: &Value, known: &Value, prefix: &str) -> anyhow::Result<()> {
    if let (Value::Object(g), Value::Object(k)) = (given, known) {
        for (key, v) in g {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            match k.get(key) {
                None => bail!("unknown config key {path:?}"),
                Some(kv) => check_keys(v, kv, &path)?,
            }
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("config key {key:?} does not name a field"))?;
        if !obj.contains_key(*p) {
            bail!("unknown config key {key:?}");
        }
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*p).expect("checked above");
    }
    unreachable!()
}

/// Builds the effective configuration. All errors here are config errors.
pub fn load(path: Option<&Path>, sets: &[String]) -> anyhow::Result<CliConfig> {
    let mut value = serde_json::to_value(CliConfig::default())?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
        check_keys(&file, &value, "")?;
        merge(&mut value, file);
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got {s:?}"))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut value, k, v)?;
    }
    serde_json::from_value(value).context("invalid config value")
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
