//! Procedural clothed-body scenes: a capsule body with a textured garment
//! band and a head region, rendered by sphere tracing.

mod dataset;
mod render;

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;

pub use dataset::{
    load_dataset, load_subject, make_dataset, make_subject, save_dataset, save_subject,
    subject_dir_name, subject_seed, DatasetItem, SubjectMeta, SynthConfig,
};
pub use render::{
    garment_images, render_scene, render_views, GarmentPair, RenderConfig, SceneViews, ViewImages,
};

pub type Rgb = [f64; 3];

/// Garment texture as a function of surface azimuth and height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Vertical stripes: one period spans `period` radians of azimuth and
    /// holds one stripe of each colour.
    Stripes { period: f64, phase: f64, colors: [Rgb; 2] },
    /// `azimuth_cells` cells around the body, cells `cell_height` tall.
    Checker { azimuth_cells: usize, cell_height: f64, colors: [Rgb; 2] },
    /// Plain `base` with a `size × size` square (arc length × height)
    /// centred at `(azimuth, height)`.
    LogoPatch { base: Rgb, logo: Rgb, azimuth: f64, height: f64, size: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Stripes,
    Checker,
    LogoPatch,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [TextureKind::Stripes, TextureKind::Checker, TextureKind::LogoPatch];
}

/// Azimuth in `(−π, π]`, zero on `+z`, increasing toward `+x`.
pub fn azimuth_of(p: Vec3) -> f64 {
    p[0].atan2(p[2])
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

impl Texture {
    pub fn kind(&self) -> TextureKind {
        match self {
            Texture::Stripes { .. } => TextureKind::Stripes,
            Texture::Checker { .. } => TextureKind::Checker,
            Texture::LogoPatch { .. } => TextureKind::LogoPatch,
        }
    }

    /// Albedo at surface azimuth `az`, height `y`, on a body of radius `radius`.
    pub fn color(&self, az: f64, y: f64, radius: f64) -> Rgb {
        match self {
            Texture::Stripes { period, phase, colors } => {
                let f = ((az - phase) / period).rem_euclid(1.0);
                colors[usize::from(f >= 0.5)]
            }
            Texture::Checker { azimuth_cells, cell_height, colors } => {
                let i = ((az.rem_euclid(TAU)) / TAU * *azimuth_cells as f64).floor() as i64;
                let j = (y / cell_height).floor() as i64;
                colors[((i + j).rem_euclid(2)) as usize]
            }
            Texture::LogoPatch { base, logo, azimuth, height, size } => {
                let arc = wrap_angle(az - azimuth) * radius;
                if arc.abs() <= size / 2.0 && (y - height).abs() <= size / 2.0 {
                    *logo
                } else {
                    *base
                }
            }
        }
    }

    /// True when the texture does not depend on azimuth modulo `π`, so the
    /// front and back garment images coincide.
    pub fn is_front_back_symmetric(&self) -> bool {
        match self {
            Texture::Stripes { period, .. } => ((PI / period).round() - PI / period).abs() < 1e-12,
            Texture::Checker { azimuth_cells, .. } => azimuth_cells % 2 == 0 && (azimuth_cells / 2) % 2 == 0,
            Texture::LogoPatch { .. } => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyScene {
    /// Capsule axis runs along `y` from `axis_lo` to `axis_hi` at `x = z = 0`.
    pub axis_lo: f64,
    pub axis_hi: f64,
    pub radius: f64,
    /// Garment band `[band_lo, band_hi]` in height.
    pub band_lo: f64,
    pub band_hi: f64,
    pub texture: Texture,
    /// Face/hair region `[head_lo, head_hi]` in height.
    pub head_lo: f64,
    pub head_hi: f64,
    pub skin: Rgb,
    pub hair: Rgb,
    pub pants: Rgb,
}

impl BodyScene {
    pub fn validate(&self) -> Result<()> {
        let (bottom, top) = (self.axis_lo - self.radius, self.axis_hi + self.radius);
        let ok = self.radius > 0.0
            && self.axis_lo <= self.axis_hi
            && self.band_lo < self.band_hi
            && self.head_lo < self.head_hi
            && self.band_hi <= self.head_lo
            && bottom <= self.band_lo
            && self.head_hi <= top;
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "scene intervals: body [{bottom}, {top}], band [{}, {}], head [{}, {}]",
                self.band_lo, self.band_hi, self.head_lo, self.head_hi
            )));
        }
        Ok(())
    }

    pub fn with_texture(&self, texture: Texture) -> Self {
        Self {
            texture,
            ..self.clone()
        }
    }

    /// Signed distance to the capsule.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let y = p[1].clamp(self.axis_lo, self.axis_hi);
        let d = [p[0], p[1] - y, p[2]];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - self.radius
    }

    /// Outward unit normal (the normalised SDF gradient).
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let y = p[1].clamp(self.axis_lo, self.axis_hi);
        crate::geom::normalize([p[0], p[1] - y, p[2]])
    }

    pub fn in_band(&self, y: f64) -> bool {
        (self.band_lo..=self.band_hi).contains(&y)
    }

    pub fn in_head(&self, y: f64) -> bool {
        (self.head_lo..=self.head_hi).contains(&y)
    }

    /// Surface albedo at a surface point.
    pub fn albedo(&self, p: Vec3) -> Rgb {
        let az = azimuth_of(p);
        let y = p[1];
        if self.in_band(y) {
            self.texture.color(az, y, self.radius)
        } else if self.in_head(y) {
            let hair_line = self.head_hi - 0.3 * (self.head_hi - self.head_lo);
            if y > hair_line || az.abs() > 0.6 * PI {
                self.hair
            } else {
                self.skin
            }
        } else if y < self.band_lo {
            self.pants
        } else {
            self.skin
        }
    }
}

impl BodyScene {
    /// `count` points spread over the capsule surface in proportion to
    /// area, with their outward normals.
    pub fn surface_samples(&self, count: usize, seed: u64) -> Vec<(Vec3, Vec3)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.radius;
        let side = TAU * r * (self.axis_hi - self.axis_lo);
        let caps = 4.0 * PI * r * r;
        (0..count)
            .map(|_| {
                let p = if rng.random::<f64>() * (side + caps) < side {
                    let az = rng.random::<f64>() * TAU;
                    let y = self.axis_lo + (self.axis_hi - self.axis_lo) * rng.random::<f64>();
                    [r * az.sin(), y, r * az.cos()]
                } else {
                    // uniform direction on the sphere, shifted to the matching cap
                    let u = rng.random::<f64>() * 2.0 - 1.0;
                    let az = rng.random::<f64>() * TAU;
                    let s = (1.0 - u * u).sqrt();
                    let d = [s * az.sin(), u, s * az.cos()];
                    let c = if u >= 0.0 { self.axis_hi } else { self.axis_lo };
                    [r * d[0], c + r * d[1], r * d[2]]
                };
                (p, self.normal(p))
            })
            .collect()
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    std::array::from_fn(|_| 0.1 + 0.8 * rng.random::<f64>())
}

/// Random texture of the given kind, parameters drawn from `rng`.
pub fn random_texture(kind: TextureKind, rng: &mut ChaCha8Rng, band: (f64, f64)) -> Texture {
    let colors = [random_color(rng), random_color(rng)];
    match kind {
        TextureKind::Stripes => Texture::Stripes {
            period: TAU / f64::from(rng.random_range(3u32..=8)),
            phase: rng.random::<f64>() * TAU,
            colors,
        },
        TextureKind::Checker => Texture::Checker {
            azimuth_cells: 2 * rng.random_range(3usize..=6),
            cell_height: 0.12 + 0.1 * rng.random::<f64>(),
            colors,
        },
        TextureKind::LogoPatch => Texture::LogoPatch {
            base: colors[0],
            logo: colors[1],
            azimuth: (rng.random::<f64>() - 0.5) * 0.8,
            height: band.0 + (band.1 - band.0) * (0.35 + 0.3 * rng.random::<f64>()),
            size: 0.15 + 0.1 * rng.random::<f64>(),
        },
    }
}

/// Seeded scene with the given garment texture kind.
pub fn make_scene(seed: u64, kind: TextureKind) -> Result<BodyScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = 0.26 + 0.06 * rng.random::<f64>();
    let (axis_lo, axis_hi) = (-0.6, 0.6);
    let band_lo = -0.3 + 0.1 * rng.random::<f64>();
    let band_hi = 0.3 + 0.1 * rng.random::<f64>();
    let head_lo = 0.55;
    let head_hi = axis_hi + radius;
    let texture = random_texture(kind, &mut rng, (band_lo, band_hi));
    let skin = [
        0.75 + 0.2 * rng.random::<f64>(),
        0.55 + 0.15 * rng.random::<f64>(),
        0.45 + 0.15 * rng.random::<f64>(),
    ];
    let hair = std::array::from_fn(|_| 0.05 + 0.25 * rng.random::<f64>());
    let pants = std::array::from_fn(|_| 0.1 + 0.4 * rng.random::<f64>());
    let scene = BodyScene {
        axis_lo,
        axis_hi,
        radius,
        band_lo,
        band_hi,
        texture,
        head_lo,
        head_hi,
        skin,
        hair,
        pants,
    };
    scene.validate()?;
    Ok(scene)
}
