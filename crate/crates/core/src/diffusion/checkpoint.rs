//! `MVTK` checkpoint files.
//!
//! Layout: magic `MVTK`, `u32` version, then blobs until end of file. Each
//! blob is `u32` name length, UTF-8 name, `u32` rank, rank × `u64` dims and
//! the little-endian `f64` data. Parameters are stored as `param/<name>`,
//! optimizer state as `adam/...`, and the model configuration as rank-0
//! `config/...` blobs (including the input channel order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diffusion::{AdamState, CorrelationMode, DenoiserConfig, ToyDenoiser};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVTK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Input channel groups of the denoiser, in concatenation order.
pub const CHANNEL_ORDER: [&str; 3] = ["z_t", "pose", "agnostic"];

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Blob {
    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self {
            name: name.into(),
            dims: Vec::new(),
            data: vec![v],
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Mat) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    fn to_mat(&self) -> Result<Mat> {
        match self.dims.as_slice() {
            [r, c] => Mat::from_vec(*r, *c, self.data.clone()),
            d => Err(Error::format("checkpoint", format!("{} has rank {}, expected 2", self.name, d.len()))),
        }
    }
}

pub fn encode_blobs(blobs: &[Blob]) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    for b in blobs {
        out.extend((b.name.len() as u32).to_le_bytes());
        out.extend(b.name.as_bytes());
        out.extend((b.dims.len() as u32).to_le_bytes());
        for d in &b.dims {
            out.extend((*d as u64).to_le_bytes());
        }
        for v in &b.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_blobs(bytes: &[u8]) -> Result<Vec<Blob>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let mut blobs = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "blob name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| Error::format("checkpoint", "dimension overflow"))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "dimension overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blobs.push(Blob { name, dims, data });
    }
    Ok(blobs)
}

fn config_blobs(c: &DenoiserConfig) -> Vec<Blob> {
    let mut out = vec![
        Blob::scalar("config/patch", c.patch as f64),
        Blob::scalar("config/image_channels", c.image_channels as f64),
        Blob::scalar("config/latent_height", c.latent_height as f64),
        Blob::scalar("config/latent_width", c.latent_width as f64),
        Blob::scalar("config/width", c.width as f64),
        Blob::scalar("config/head_dim", c.head_dim as f64),
        Blob::scalar("config/blocks", c.blocks as f64),
        Blob::scalar("config/mlp_hidden", c.mlp_hidden as f64),
        Blob::scalar("config/frequencies", c.frequencies as f64),
        Blob::scalar("config/timesteps", c.timesteps as f64),
        Blob::scalar(
            "config/correlation_identity",
            f64::from(u8::from(c.correlation == CorrelationMode::Identity)),
        ),
    ];
    for (i, name) in CHANNEL_ORDER.iter().enumerate() {
        out.push(Blob::scalar(format!("config/channel_order/{name}"), i as f64));
    }
    out
}

/// Serializes a model and, optionally, its optimizer state.
pub fn encode_checkpoint(model: &ToyDenoiser, optimizer: Option<&AdamState>) -> Vec<u8> {
    let mut blobs = config_blobs(model.config());
    for (name, m) in model.params() {
        blobs.push(Blob::matrix(format!("param/{name}"), m));
    }
    if let Some(state) = optimizer {
        blobs.push(Blob::scalar("adam/step", state.step as f64));
        for (name, m) in &state.m {
            blobs.push(Blob::matrix(format!("adam/m/{name}"), m));
        }
        for (name, v) in &state.v {
            blobs.push(Blob::matrix(format!("adam/v/{name}"), v));
        }
    }
    encode_blobs(&blobs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ToyDenoiser,
    pub optimizer: Option<AdamState>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let blobs = decode_blobs(bytes)?;
    let mut scalars = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut step = None;
    for b in &blobs {
        if let Some(key) = b.name.strip_prefix("config/") {
            if !b.dims.is_empty() {
                return Err(Error::format("checkpoint", format!("{} must be a scalar", b.name)));
            }
            scalars.insert(key.to_string(), b.data[0]);
        } else if let Some(key) = b.name.strip_prefix("param/") {
            params.insert(key.to_string(), b.to_mat()?);
        } else if let Some(key) = b.name.strip_prefix("adam/m/") {
            m.insert(key.to_string(), b.to_mat()?);
        } else if let Some(key) = b.name.strip_prefix("adam/v/") {
            v.insert(key.to_string(), b.to_mat()?);
        } else if b.name == "adam/step" {
            step = Some(b.data.first().copied().unwrap_or(0.0) as u64);
        } else {
            return Err(Error::format("checkpoint", format!("unknown blob {}", b.name)));
        }
    }
    let get = |k: &str| -> Result<usize> {
        scalars
            .get(k)
            .map(|v| *v as usize)
            .ok_or_else(|| Error::format("checkpoint", format!("missing config/{k}")))
    };
    for (i, name) in CHANNEL_ORDER.iter().enumerate() {
        if get(&format!("channel_order/{name}"))? != i {
            return Err(Error::format("checkpoint", "unsupported input channel order"));
        }
    }
    let config = DenoiserConfig {
        patch: get("patch")?,
        image_channels: get("image_channels")?,
        latent_height: get("latent_height")?,
        latent_width: get("latent_width")?,
        width: get("width")?,
        head_dim: get("head_dim")?,
        blocks: get("blocks")?,
        mlp_hidden: get("mlp_hidden")?,
        frequencies: get("frequencies")?,
        timesteps: get("timesteps")?,
        correlation: if get("correlation_identity")? == 1 {
            CorrelationMode::Identity
        } else {
            CorrelationMode::Rotation
        },
    };
    let model = ToyDenoiser::from_parts(config, params)?;
    let optimizer = match step {
        Some(step) => {
            if m.len() != model.params().len() || v.len() != model.params().len() {
                return Err(Error::format("checkpoint", "incomplete optimizer state"));
            }
            Some(AdamState { step, m, v })
        }
        None => None,
    };
    Ok(Checkpoint { model, optimizer })
}

pub fn save_checkpoint(path: &Path, model: &ToyDenoiser, optimizer: Option<&AdamState>) -> Result<()> {
    fs::write(path, encode_checkpoint(model, optimizer))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
