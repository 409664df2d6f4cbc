use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{rig_from_azimuths, CameraIntrinsics, ViewRig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthdata::render::RenderConfig;
use crate::synthdata::{
    garment_images, make_scene, random_texture, render_scene, BodyScene, GarmentPair, SceneViews,
    Texture, TextureKind, ViewImages,
};

/// Image and camera settings for generated subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub camera_distance: f64,
    pub elevation: f64,
    /// World half-height framed by the cameras.
    pub half_extent: f64,
    pub render: RenderConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 96,
            camera_distance: 3.0,
            elevation: 0.1,
            half_extent: 1.0,
            render: RenderConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::framing(self.width, self.height, self.half_extent, self.camera_distance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub index: usize,
    pub seed: u64,
    pub scene: BodyScene,
    pub target_texture: Texture,
    pub azimuth_offset: f64,
    pub synth: SynthConfig,
}

/// One subject with its garment-swap editing target.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub meta: SubjectMeta,
    pub views: SceneViews,
    pub garment: GarmentPair,
    /// Garment to put on the subject.
    pub target_garment: GarmentPair,
    /// Ground-truth edited views: the subject rendered wearing the target.
    pub target_rgb: Vec<Image>,
}

impl DatasetItem {
    pub fn target_scene(&self) -> BodyScene {
        self.meta.scene.with_texture(self.meta.target_texture.clone())
    }
}

pub fn subject_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn make_subject(index: usize, views: usize, seed: u64, cfg: &SynthConfig) -> Result<DatasetItem> {
    let s = subject_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let kind = TextureKind::ALL[rng.random_range(0..3)];
    let others: Vec<TextureKind> = TextureKind::ALL.into_iter().filter(|k| *k != kind).collect();
    let target_kind = others[rng.random_range(0..others.len())];
    let scene = make_scene(rng.next_u64(), kind)?;
    let target_texture = random_texture(target_kind, &mut rng, (scene.band_lo, scene.band_hi));
    let azimuth_offset = rng.random::<f64>() * std::f64::consts::TAU / views as f64;
    let azimuths: Vec<f64> = (0..views)
        .map(|k| azimuth_offset + std::f64::consts::TAU * k as f64 / views as f64)
        .collect();
    let rig = rig_from_azimuths(cfg.intrinsics()?, &azimuths, cfg.camera_distance, cfg.elevation)?;
    let meta = SubjectMeta {
        index,
        seed: s,
        scene,
        target_texture,
        azimuth_offset,
        synth: *cfg,
    };
    build_item(meta, rig)
}

fn build_item(meta: SubjectMeta, rig: ViewRig) -> Result<DatasetItem> {
    let cfg = &meta.synth;
    let views = render_scene(&meta.scene, &rig, &cfg.render)?;
    let target = meta.scene.with_texture(meta.target_texture.clone());
    let target_rgb = render_scene(&target, &rig, &cfg.render)?
        .views
        .into_iter()
        .map(|v| v.rgb)
        .collect();
    Ok(DatasetItem {
        garment: garment_images(&meta.scene, cfg.width, cfg.height)?,
        target_garment: garment_images(&target, cfg.width, cfg.height)?,
        meta,
        views,
        target_rgb,
    })
}

/// `n_subjects` subjects with `views_per_subject` evenly spaced cameras
/// each (random common azimuth offset per subject). Each subject's target
/// garment has a different texture kind from the one it wears.
pub fn make_dataset(n_subjects: usize, views_per_subject: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<DatasetItem>> {
    if n_subjects < 1 {
        return Err(Error::InvalidParameter("dataset needs at least one subject".into()));
    }
    if views_per_subject < 1 {
        return Err(Error::InvalidParameter("subjects need at least one view".into()));
    }
    (0..n_subjects)
        .map(|i| make_subject(i, views_per_subject, seed, cfg))
        .collect()
}

pub fn subject_dir_name(index: usize) -> String {
    format!("subject_{index:04}")
}

fn view_path(dir: &Path, prefix: &str, i: usize, kind: &str) -> PathBuf {
    dir.join(format!("{prefix}view_{i:03}_{kind}.ppm"))
}

/// Writes one subject into `dir` (which must exist).
pub fn save_subject(dir: &Path, item: &DatasetItem) -> Result<()> {
    for (i, v) in item.views.views.iter().enumerate() {
        v.rgb.save_ppm(&view_path(dir, "", i, "rgb"))?;
        v.normal.save_ppm(&view_path(dir, "", i, "normal"))?;
        v.agnostic.save_ppm(&view_path(dir, "", i, "agnostic"))?;
        v.agnostic_mask.save_ppm(&view_path(dir, "", i, "mask"))?;
        v.face_mask.save_ppm(&view_path(dir, "", i, "face"))?;
    }
    for (i, t) in item.target_rgb.iter().enumerate() {
        t.save_ppm(&view_path(dir, "target_", i, "rgb"))?;
    }
    item.garment.front.save_ppm(&dir.join("garment_f.ppm"))?;
    item.garment.back.save_ppm(&dir.join("garment_b.ppm"))?;
    item.target_garment.front.save_ppm(&dir.join("target_garment_f.ppm"))?;
    item.target_garment.back.save_ppm(&dir.join("target_garment_b.ppm"))?;
    item.views.rig.save(&dir.join("rig.json"))?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&item.meta)?)?;
    Ok(())
}

fn mask(img: Image) -> Image {
    let mut g = img.to_gray();
    g.data_mut().iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    g
}

/// Reads a subject written by `save_subject`. Images come back quantised
/// to 8 bits; the body mask is recovered from the normal map.
pub fn load_subject(dir: &Path) -> Result<DatasetItem> {
    let meta: SubjectMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let rig = ViewRig::load(&dir.join("rig.json"))?;
    let mut views = Vec::with_capacity(rig.view_count());
    let mut target_rgb = Vec::with_capacity(rig.view_count());
    for i in 0..rig.view_count() {
        let normal = Image::load_ppm(&view_path(dir, "", i, "normal"))?;
        let mut body = Image::new(normal.width(), normal.height(), 1);
        for y in 0..normal.height() {
            for x in 0..normal.width() {
                if normal.pixel(x, y).iter().any(|v| *v != 0.0) {
                    body.set(x, y, 0, 1.0);
                }
            }
        }
        views.push(ViewImages {
            rgb: Image::load_ppm(&view_path(dir, "", i, "rgb"))?,
            normal,
            agnostic: Image::load_ppm(&view_path(dir, "", i, "agnostic"))?,
            agnostic_mask: mask(Image::load_ppm(&view_path(dir, "", i, "mask"))?),
            face_mask: mask(Image::load_ppm(&view_path(dir, "", i, "face"))?),
            body_mask: body,
        });
        target_rgb.push(Image::load_ppm(&view_path(dir, "target_", i, "rgb"))?);
    }
    Ok(DatasetItem {
        meta,
        views: SceneViews { views, rig },
        garment: GarmentPair {
            front: Image::load_ppm(&dir.join("garment_f.ppm"))?,
            back: Image::load_ppm(&dir.join("garment_b.ppm"))?,
        },
        target_garment: GarmentPair {
            front: Image::load_ppm(&dir.join("target_garment_f.ppm"))?,
            back: Image::load_ppm(&dir.join("target_garment_b.ppm"))?,
        },
        target_rgb,
    })
}

/// Writes every subject into `root/subject_NNNN/`.
pub fn save_dataset(root: &Path, items: &[DatasetItem]) -> Result<()> {
    for item in items {
        let dir = root.join(subject_dir_name(item.meta.index));
        fs::create_dir_all(&dir)?;
        save_subject(&dir, item)?;
    }
    Ok(())
}

/// Loads every `subject_*` directory under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<DatasetItem>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("subject_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Empty(format!("no subjects under {}", root.display())));
    }
    dirs.iter().map(|d| load_subject(d)).collect()
}
