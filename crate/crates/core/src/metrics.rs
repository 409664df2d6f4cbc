//! Garment-alignment similarity and directional consistency over a
//! turntable of views, with pluggable embedding providers.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::camera::ViewRig;
use crate::error::{Error, Result};
use crate::image::{hash_hex, Image};

/// Number of views in the evaluation turntable.
pub const TURNTABLE_VIEWS: usize = 120;

const UNIT_TOLERANCE: f64 = 1e-9;

/// Maps an image to a unit vector.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-300 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded Gaussian random projection of the centred pixels `x − ½`,
/// normalised to unit length. The projection for each image shape is
/// generated once and cached.
#[derive(Debug)]
pub struct ToyEmbedder {
    dim: usize,
    seed: u64,
    cache: Mutex<HashMap<(usize, usize, usize), Arc<Vec<f64>>>>,
}

impl ToyEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            seed,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn projection(&self, dims: (usize, usize, usize)) -> Arc<Vec<f64>> {
        let mut cache = self.cache.lock().expect("embedder cache poisoned");
        cache
            .entry(dims)
            .or_insert_with(|| {
                let n = dims.0 * dims.1 * dims.2;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(((dims.0 as u64) << 40) ^ ((dims.1 as u64) << 16) ^ dims.2 as u64);
                Arc::new((0..n * self.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            })
            .clone()
    }
}

impl EmbeddingProvider for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let p = self.projection(image.dims());
        let mut out = vec![0.0; self.dim];
        for (i, x) in image.data().iter().enumerate() {
            let c = x - 0.5;
            let row = &p[i * self.dim..(i + 1) * self.dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
        Ok(normalize(out))
    }
}

/// Front, back and side view index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewClasses {
    pub front: Vec<usize>,
    pub back: Vec<usize>,
    pub side: Vec<usize>,
}

/// Splits a 120-view turntable by camera azimuth: front within 60° of the
/// subject's facing direction (`+z`), back within 60° of the opposite
/// direction, side otherwise. Bands are half-open, `[−60°, 60°)`.
pub fn classify_views(rig: &ViewRig) -> Result<ViewClasses> {
    if rig.view_count() != TURNTABLE_VIEWS {
        return Err(Error::Dimension(format!(
            "view classification needs {TURNTABLE_VIEWS} views, got {}",
            rig.view_count()
        )));
    }
    let mut classes = ViewClasses {
        front: Vec::new(),
        back: Vec::new(),
        side: Vec::new(),
    };
    for (i, cam) in rig.cameras().iter().enumerate() {
        let c = cam.extrinsics.center();
        let az = c[0].atan2(c[2]);
        let sector = (((az + PI / 3.0).rem_euclid(TAU) / TAU) * 6.0 + 1e-9).floor() as usize % 6;
        match sector {
            0 | 1 => classes.front.push(i),
            3 | 4 => classes.back.push(i),
            _ => classes.side.push(i),
        }
    }
    let third = TURNTABLE_VIEWS / 3;
    if classes.front.len() != third || classes.back.len() != third {
        return Err(Error::InvalidParameter(format!(
            "rig is not uniformly spaced: {} front, {} back, {} side views",
            classes.front.len(),
            classes.back.len(),
            classes.side.len()
        )));
    }
    Ok(classes)
}

/// Mean similarity between the front garment and front views plus the back
/// garment and back views; side views are excluded.
pub fn dino_sim(
    garment_front: &Image,
    garment_back: &Image,
    edited: &[Image],
    classes: &ViewClasses,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    let count = classes.front.len() + classes.back.len();
    if count == 0 {
        return Err(Error::Empty("no front or back views".into()));
    }
    if let Some(&i) = classes.front.iter().chain(&classes.back).find(|&&i| i >= edited.len()) {
        return Err(Error::Dimension(format!("view {i} out of {} edited views", edited.len())));
    }
    let gf = provider.embed(garment_front)?;
    let gb = provider.embed(garment_back)?;
    let mut sum = 0.0;
    for &i in &classes.front {
        sum += dot(&gf, &provider.embed(&edited[i])?);
    }
    for &i in &classes.back {
        sum += dot(&gb, &provider.embed(&edited[i])?);
    }
    Ok(sum / count as f64)
}

/// `(1/n)·Σᵢ (C(eᵢ) − C(oᵢ))·(C(eᵢ₊₁) − C(oᵢ₊₁))`, indices cyclic.
pub fn clip_cons(edited: &[Image], original: &[Image], provider: &dyn EmbeddingProvider) -> Result<f64> {
    if edited.len() != original.len() {
        return Err(Error::Dimension(format!(
            "{} edited views vs {} originals",
            edited.len(),
            original.len()
        )));
    }
    if edited.len() < 2 {
        return Err(Error::InvalidParameter("consistency needs at least two views".into()));
    }
    let diffs = edited
        .iter()
        .zip(original)
        .map(|(e, o)| {
            let (ce, co) = (provider.embed(e)?, provider.embed(o)?);
            Ok(ce.iter().zip(&co).map(|(a, b)| a - b).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(clip_cons_from_differences(&diffs))
}

/// The consistency sum for precomputed embedding differences.
pub fn clip_cons_from_differences(diffs: &[Vec<f64>]) -> f64 {
    let n = diffs.len();
    (0..n).map(|i| dot(&diffs[i], &diffs[(i + 1) % n])).sum::<f64>() / n as f64
}

pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBEDDINGS_VERSION: u32 = 1;

/// Precomputed embeddings keyed by image content hash.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<[u8; 32], Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            entries: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, hash: [u8; 32], vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension(format!("vector of length {}, table dimension {}", vector.len(), self.dim)));
        }
        let n = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidParameter(format!("embedding norm {n} is not 1")));
        }
        self.entries.insert(hash, vector);
        Ok(())
    }

    pub fn insert_image(&mut self, image: &Image, vector: Vec<f64>) -> Result<()> {
        self.insert(image.content_hash(), vector)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = EMBEDDINGS_MAGIC.to_vec();
        out.extend(EMBEDDINGS_VERSION.to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        out.extend((self.entries.len() as u64).to_le_bytes());
        for (hash, v) in &self.entries {
            out.extend(hash);
            for x in v {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != EMBEDDINGS_MAGIC {
            return Err(Error::format("embeddings", "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != EMBEDDINGS_VERSION {
            return Err(Error::format("embeddings", format!("unsupported version {version}")));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let entry = 32 + dim * 8;
        let body = &bytes[20..];
        if Some(body.len()) != count.checked_mul(entry) {
            return Err(Error::format("embeddings", format!("{} bytes for {count} entries", body.len())));
        }
        let mut table = Self::new(dim).map_err(|_| Error::format("embeddings", "zero dimension"))?;
        for chunk in body.chunks_exact(entry) {
            let hash: [u8; 32] = chunk[..32].try_into().expect("32 bytes");
            let v = chunk[32..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            table.insert(hash, v)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Reads an embeddings file as a provider.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    EmbeddingTable::decode(&fs::read(path)?)
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let h = image.content_hash();
        self.entries
            .get(&h)
            .cloned()
            .ok_or_else(|| Error::UnknownImage(hash_hex(&h)))
    }
}
