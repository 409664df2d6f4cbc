use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use mvedit::camera::{uniform_azimuths, ViewRig};
use mvedit::diffusion::{load_checkpoint, save_checkpoint, AdamState, ToyDenoiser};
use mvedit::image::Image;
use mvedit::metrics::{load_embeddings, EmbeddingProvider};
use mvedit::pipeline::{
    composite_preserve, edit_views, evaluate, fit_source, initial_cloud, reconstruct, render_turntable,
    train_two_stage, training_subject, Report,
};
use mvedit::splat::{load_cloud, save_cloud};
use mvedit::synthdata::{
    load_dataset, load_subject, make_dataset, render_scene, save_subject, subject_dir_name, BodyScene, GarmentPair,
};
use serde::{Deserialize, Serialize};

use crate::config::CliConfig;

/// Distinguishes bad invocations (exit 2) from failures while running (exit 1).
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mvedit::Error> for Failure {
    fn from(e: mvedit::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type Outcome = std::result::Result<(), Failure>;

fn config_err(msg: String) -> Failure {
    Failure::Config(anyhow!(msg))
}

fn require_dir(p: &Path, what: &str) -> std::result::Result<(), Failure> {
    if !p.is_dir() {
        return Err(config_err(format!("{what} {} is not a directory", p.display())));
    }
    Ok(())
}

fn require_file(p: &Path, what: &str) -> std::result::Result<(), Failure> {
    if !p.is_file() {
        return Err(config_err(format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(out: &Path, cfg: &CliConfig) -> Result<()> {
    write_json(&out.join("config.json"), cfg)
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

pub fn synth(cfg: &CliConfig, out: &Path) -> Outcome {
    if cfg.subjects == 0 || cfg.views == 0 {
        return Err(config_err("subjects and views must be positive".into()));
    }
    let items = make_dataset(cfg.subjects, cfg.views, cfg.pipeline.seed, &cfg.pipeline.synth)?;
    create_out(out)?;
    for item in &items {
        let name = subject_dir_name(item.meta.index);
        let tmp = out.join(format!(".{name}.tmp"));
        let dst = out.join(&name);
        let write = || -> Result<()> {
            if tmp.exists() {
                fs::remove_dir_all(&tmp)?;
            }
            fs::create_dir(&tmp)?;
            save_subject(&tmp, item)?;
            if dst.exists() {
                fs::remove_dir_all(&dst)?;
            }
            fs::rename(&tmp, &dst)?;
            Ok(())
        };
        if let Err(e) = write() {
            let _ = fs::remove_dir_all(&tmp);
            return Err(Failure::Runtime(e.context(format!("writing {}", dst.display()))));
        }
    }
    echo_config(out, cfg)?;
    println!("wrote {} subjects x {} views to {}", items.len(), cfg.views, out.display());
    Ok(())
}

pub const TRACE_FILE: &str = "loss_trace.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn read_trace(path: &Path, before: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut lines = Vec::new();
    for line in text.lines() {
        let step: u64 = line
            .split_whitespace()
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| anyhow!("bad trace line {line:?} in {}", path.display()))?;
        if step < before {
            lines.push(line.to_string());
        }
    }
    Ok(lines)
}

pub fn train(cfg: &CliConfig, dataset: &Path, resume: Option<&Path>, out: &Path) -> Outcome {
    require_dir(dataset, "dataset")?;
    if let Some(r) = resume {
        require_file(r, "checkpoint")?;
    }
    let p = &cfg.pipeline;
    let (mut model, mut state, mut trace) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if *ckpt.model.config() != p.model {
                return Err(config_err(format!(
                    "checkpoint {} was trained with a different model config",
                    path.display()
                )));
            }
            let state = ckpt.optimizer.unwrap_or_else(|| AdamState::new(&ckpt.model));
            let prior = path.parent().map(|d| d.join(TRACE_FILE)).unwrap_or_default();
            let trace = read_trace(&prior, state.step)?;
            if trace.len() as u64 != state.step {
                return Err(Failure::Runtime(anyhow!(
                    "trace next to {} has {} lines but the checkpoint is at step {}",
                    path.display(),
                    trace.len(),
                    state.step
                )));
            }
            (ckpt.model, state, trace)
        }
        None => {
            let model = ToyDenoiser::init(p.model, p.seed)?;
            let state = AdamState::new(&model);
            (model, state, Vec::new())
        }
    };
    let items = load_dataset(dataset)?;
    let subjects: Vec<_> = items.iter().map(training_subject).collect();
    let start = state.step;
    let losses = train_two_stage(&mut model, &mut state, &subjects, p)?;
    trace.extend(losses.iter().enumerate().map(|(i, l)| format!("{} {l:e}", start + i as u64)));
    create_out(out)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &model, Some(&state))?;
    let mut text = trace.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(out.join(TRACE_FILE), text)?;
    echo_config(out, cfg)?;
    println!(
        "trained {} steps ({} new) on {} subjects; final loss {}",
        state.step,
        losses.len(),
        subjects.len(),
        losses.last().map_or("n/a".to_string(), |l| format!("{l:.4}"))
    );
    Ok(())
}

fn indexed(dir: &Path, prefix: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}_{i:03}.{ext}"))
}

pub fn edit(cfg: &CliConfig, checkpoint: &Path, dataset: &Path, subject: usize, out: &Path) -> Outcome {
    require_file(checkpoint, "checkpoint")?;
    let subject_dir = dataset.join(subject_dir_name(subject));
    require_dir(&subject_dir, "subject")?;
    let model = load_checkpoint(checkpoint)?.model;
    let mut p = cfg.pipeline;
    p.model = *model.config();
    p.validate().map_err(|e| Failure::Config(e.into()))?;
    let item = load_subject(&subject_dir)?;
    let scene = &item.meta.scene;
    let garment = &item.target_garment;
    let original = render_scene(scene, &p.test_rig()?, &p.synth.render)?;
    let raw = edit_views(&model, &original, garment, &p)?;
    create_out(out)?;
    for (i, (e, v)) in raw.iter().zip(&original.views).enumerate() {
        let edited = composite_preserve(e, &v.rgb, &v.face_mask)?;
        edited.save_pfm(&indexed(out, "edited", i, "pfm"))?;
        edited.save_ppm(&indexed(out, "edited", i, "ppm"))?;
        v.rgb.save_pfm(&indexed(out, "original", i, "pfm"))?;
    }
    original.rig.save(&out.join("rig.json"))?;
    write_json(&out.join("scene.json"), scene)?;
    garment.front.save_pfm(&out.join("garment_f.pfm"))?;
    garment.back.save_pfm(&out.join("garment_b.pfm"))?;
    echo_config(out, cfg)?;
    println!("edited {} views of subject {subject} into {}", raw.len(), out.display());
    Ok(())
}

struct EditDir {
    rig: ViewRig,
    scene: BodyScene,
    original: Vec<Image>,
    edited: Vec<Image>,
}

fn load_edits(dir: &Path) -> Result<EditDir> {
    let rig = ViewRig::load(&dir.join("rig.json"))?;
    let scene: BodyScene = serde_json::from_str(&fs::read_to_string(dir.join("scene.json"))?)?;
    let load = |prefix: &str| -> Result<Vec<Image>> {
        (0..rig.view_count())
            .map(|i| Ok(Image::load_pfm(&indexed(dir, prefix, i, "pfm"))?))
            .collect()
    };
    Ok(EditDir {
        original: load("original")?,
        edited: load("edited")?,
        scene,
        rig,
    })
}

fn load_garment(dir: &Path) -> Result<GarmentPair> {
    Ok(GarmentPair {
        front: Image::load_pfm(&dir.join("garment_f.pfm"))?,
        back: Image::load_pfm(&dir.join("garment_b.pfm"))?,
    })
}

/// Per-view fitting outcome, written next to the clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub kept_views: Vec<usize>,
    pub discarded_views: Vec<usize>,
    pub first_fit_losses: Vec<f64>,
    pub final_fit_losses: Vec<f64>,
}

pub fn reconstruct_cmd(cfg: &CliConfig, edits: &Path, out: &Path) -> Outcome {
    require_dir(edits, "edits")?;
    let p = &cfg.pipeline;
    let d = load_edits(edits)?;
    let source = fit_source(&d.original, &d.rig, &initial_cloud(&d.scene, p)?, p)?;
    let rec = reconstruct(&source, &d.edited, &d.rig, p)?;
    create_out(out)?;
    save_cloud(&out.join("source.gspl"), &source)?;
    save_cloud(&out.join("cloud.gspl"), &rec.cloud)?;
    let summary = FitSummary {
        discarded_views: (0..d.edited.len()).filter(|i| !rec.kept.contains(i)).collect(),
        kept_views: rec.kept.clone(),
        first_fit_losses: rec.first_losses.clone(),
        final_fit_losses: rec.final_losses.clone(),
    };
    write_json(&out.join("fit.json"), &summary)?;
    echo_config(out, cfg)?;
    println!(
        "reconstructed {} Gaussians; kept {} of {} views",
        rec.cloud.len(),
        rec.kept.len(),
        d.edited.len()
    );
    Ok(())
}

pub struct EvalInputs<'a> {
    pub source: PathBuf,
    pub cloud: PathBuf,
    pub fit: Option<PathBuf>,
    pub edits: Option<&'a Path>,
    pub embeddings: Option<&'a Path>,
}

pub fn eval(cfg: &CliConfig, inputs: &EvalInputs, out: &Path) -> Outcome {
    require_file(&inputs.source, "source cloud")?;
    require_file(&inputs.cloud, "cloud")?;
    if let Some(e) = inputs.edits {
        require_dir(e, "edits")?;
    }
    if let Some(e) = inputs.embeddings {
        require_file(e, "embeddings")?;
    }
    let p = &cfg.pipeline;
    let source = load_cloud(&inputs.source)?;
    let cloud = load_cloud(&inputs.cloud)?;
    let garment = inputs.edits.map(load_garment).transpose()?;
    let provider: Box<dyn EmbeddingProvider> = match inputs.embeddings {
        Some(path) => Box::new(load_embeddings(path)?),
        None => Box::new(p.embedder()?),
    };
    let metrics = evaluate(&source, &cloud, garment.as_ref(), p, provider.as_ref())?;
    let fit = match &inputs.fit {
        Some(path) if path.is_file() => Some(serde_json::from_str::<FitSummary>(&fs::read_to_string(path)?)?),
        _ => None,
    };
    let fit = fit.unwrap_or(FitSummary {
        kept_views: Vec::new(),
        discarded_views: Vec::new(),
        first_fit_losses: Vec::new(),
        final_fit_losses: Vec::new(),
    });
    let report = Report {
        clip_cons: metrics.clip_cons,
        dino_sim: metrics.dino_sim,
        kept_views: fit.kept_views,
        discarded_views: fit.discarded_views,
        first_fit_losses: fit.first_fit_losses,
        final_fit_losses: fit.final_fit_losses,
        config: *p,
    };
    create_out(out)?;
    write_json(&out.join("report.json"), &report)?;
    echo_config(out, cfg)?;
    match metrics.dino_sim {
        Some(d) => println!("clip_cons {:.6} dino_sim {d:.6}", metrics.clip_cons),
        None => println!("clip_cons {:.6}", metrics.clip_cons),
    }
    Ok(())
}

#[derive(Serialize)]
struct TurntableMeta<'a> {
    frames: usize,
    azimuths: Vec<f64>,
    config: &'a CliConfig,
}

pub fn turntable(cfg: &CliConfig, cloud_path: &Path, out: &Path) -> Outcome {
    require_file(cloud_path, "cloud")?;
    let n = cfg.turntable_frames;
    if n == 0 {
        return Err(config_err("turntable_frames must be positive".into()));
    }
    let cloud = load_cloud(cloud_path)?;
    let rig = cfg.pipeline.turntable_rig(n)?;
    let frames = render_turntable(&cloud, &rig, &cfg.pipeline.edit_fit.splat)?;
    create_out(out)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_ppm(&indexed(out, "frame", i, "ppm"))?;
    }
    rig.save(&out.join("rig.json"))?;
    write_json(
        &out.join("turntable.json"),
        &TurntableMeta {
            frames: n,
            azimuths: uniform_azimuths(n),
            config: cfg,
        },
    )?;
    println!("wrote {n} frames to {}", out.display());
    Ok(())
}
