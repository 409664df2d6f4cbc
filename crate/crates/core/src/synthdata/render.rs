use serde::{Deserialize, Serialize};

use crate::camera::{Camera, ViewRig};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::image::Image;
use crate::synthdata::{azimuth_of, BodyScene};

/// Rendering options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Radius in pixels of the dilation applied to the garment mask.
    pub dilation: usize,
    /// Fill value of the masked region in the agnostic image.
    pub agnostic_fill: f64,
    pub ambient: f64,
    pub diffuse: f64,
    pub light: Vec3,
    pub max_steps: usize,
    pub hit_epsilon: f64,
    pub max_distance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            dilation: 2,
            agnostic_fill: 0.5,
            ambient: 0.55,
            diffuse: 0.45,
            light: [0.3, 0.9, 0.3],
            max_steps: 256,
            hit_epsilon: 1e-10,
            max_distance: 100.0,
        }
    }
}

/// Images of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImages {
    pub rgb: Image,
    /// Camera-space unit normals encoded as `(n + 1)/2`; zero off the body.
    pub normal: Image,
    pub agnostic: Image,
    /// Single channel, 1 inside the dilated garment region.
    pub agnostic_mask: Image,
    /// Single channel, 1 on face/hair pixels outside the agnostic mask.
    pub face_mask: Image,
    /// Single channel, 1 where a ray hits the body.
    pub body_mask: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneViews {
    pub views: Vec<ViewImages>,
    pub rig: ViewRig,
}

impl SceneViews {
    pub fn rgb(&self) -> Vec<Image> {
        self.views.iter().map(|v| v.rgb.clone()).collect()
    }

    pub fn normals(&self) -> Vec<Image> {
        self.views.iter().map(|v| v.normal.clone()).collect()
    }

    pub fn agnostic(&self) -> Vec<Image> {
        self.views.iter().map(|v| v.agnostic.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarmentPair {
    pub front: Image,
    pub back: Image,
}

/// Sphere-traces one ray; returns the hit point.
fn trace(scene: &BodyScene, origin: Vec3, dir: Vec3, cfg: &RenderConfig) -> Option<Vec3> {
    let mut t = 0.0;
    for _ in 0..cfg.max_steps {
        let p = geom::add(origin, geom::scale(dir, t));
        let d = scene.sdf(p);
        if d < cfg.hit_epsilon {
            return Some(p);
        }
        t += d;
        if t > cfg.max_distance {
            return None;
        }
    }
    None
}

struct Hit {
    point: Vec3,
    normal_cam: Vec3,
    shaded: [f64; 3],
}

fn shade(scene: &BodyScene, p: Vec3, cfg: &RenderConfig) -> [f64; 3] {
    let n = scene.normal(p);
    let l = geom::normalize(cfg.light);
    let k = cfg.ambient + cfg.diffuse * geom::dot(n, l).max(0.0);
    scene.albedo(p).map(|c| (c * k).clamp(0.0, 1.0))
}

fn cast(scene: &BodyScene, cam: &Camera, cfg: &RenderConfig) -> Vec<Option<Hit>> {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let origin = cam.extrinsics.center();
    let rot = cam.extrinsics.rotation();
    (0..w * h)
        .map(|i| {
            let dir = cam.ray_direction((i % w) as f64, (i / w) as f64);
            trace(scene, origin, dir, cfg).map(|point| Hit {
                point,
                normal_cam: geom::mat_vec(rot, scene.normal(point)),
                shaded: shade(scene, point, cfg),
            })
        })
        .collect()
}

fn dilate(mask: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    let ri = r as i64;
    let mut out = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask[(y * w as i64 + x) as usize] {
                continue;
            }
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dx * dx + dy * dy > ri * ri {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                        out[(ny * w as i64 + nx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

fn render_view(scene: &BodyScene, cam: &Camera, cfg: &RenderConfig) -> ViewImages {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let hits = cast(scene, cam, cfg);
    let mut rgb = Image::new(w, h, 3);
    let mut normal = Image::new(w, h, 3);
    let mut body = Image::new(w, h, 1);
    let band: Vec<bool> = hits
        .iter()
        .map(|hit| hit.as_ref().is_some_and(|hit| scene.in_band(hit.point[1])))
        .collect();
    let masked = dilate(&band, w, h, cfg.dilation);
    let mut agnostic_mask = Image::new(w, h, 1);
    let mut face = Image::new(w, h, 1);
    for (i, hit) in hits.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        if masked[i] {
            agnostic_mask.set(x, y, 0, 1.0);
        }
        let Some(hit) = hit else { continue };
        rgb.pixel_mut(x, y).copy_from_slice(&hit.shaded);
        normal
            .pixel_mut(x, y)
            .copy_from_slice(&hit.normal_cam.map(|n| (n + 1.0) / 2.0));
        body.set(x, y, 0, 1.0);
        if scene.in_head(hit.point[1]) && !masked[i] {
            face.set(x, y, 0, 1.0);
        }
    }
    let mut agnostic = rgb.clone();
    for (i, m) in masked.iter().enumerate() {
        if *m {
            agnostic.pixel_mut(i % w, i / w).fill(cfg.agnostic_fill);
        }
    }
    ViewImages {
        rgb,
        normal,
        agnostic,
        agnostic_mask,
        face_mask: face,
        body_mask: body,
    }
}

/// Renders every camera of the rig.
pub fn render_scene(scene: &BodyScene, rig: &ViewRig, cfg: &RenderConfig) -> Result<SceneViews> {
    scene.validate()?;
    Ok(SceneViews {
        views: render_views(scene, rig.cameras(), cfg),
        rig: rig.clone(),
    })
}

pub fn render_views(scene: &BodyScene, cams: &[Camera], cfg: &RenderConfig) -> Vec<ViewImages> {
    cams.iter().map(|c| render_view(scene, c, cfg)).collect()
}

/// Orthographic front (azimuth 0) and back (azimuth π) images of the
/// garment band's albedo. Columns span the body diameter as seen by a
/// camera on that side; rows span the band from top to bottom.
pub fn garment_images(scene: &BodyScene, width: usize, height: usize) -> Result<GarmentPair> {
    scene.validate()?;
    if width < 2 || height < 2 {
        return Err(Error::InvalidParameter(format!("garment image {width}x{height}")));
    }
    let r = scene.radius;
    let make = |back: bool| {
        let mut img = Image::new(width, height, 3);
        for v in 0..height {
            let y = scene.band_hi - (scene.band_hi - scene.band_lo) * v as f64 / (height - 1) as f64;
            for u in 0..width {
                let s = r * (1.0 - 2.0 * u as f64 / (width - 1) as f64);
                let zc = (r * r - s * s).max(0.0).sqrt();
                // a viewer on +z sees +x on its left; one on −z sees it on its right
                let p = if back { [-s, y, -zc] } else { [s, y, zc] };
                let c = scene.texture.color(azimuth_of(p), y, r);
                img.pixel_mut(u, v).copy_from_slice(&c);
            }
        }
        img
    };
    Ok(GarmentPair {
        front: make(false),
        back: make(true),
    })
}
