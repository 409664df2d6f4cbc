//! `GSPL` cloud files: magic, `u32` version, `u64` count, then 14
//! little-endian `f64` per Gaussian (mu, scale, quat, opacity, color).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::splat::{Gaussian, GaussianCloud, PARAMS_PER_GAUSSIAN};

pub const CLOUD_MAGIC: &[u8; 4] = b"GSPL";
pub const CLOUD_VERSION: u32 = 1;

pub fn encode_cloud(cloud: &GaussianCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + cloud.len() * PARAMS_PER_GAUSSIAN * 8);
    out.extend(CLOUD_MAGIC);
    out.extend(CLOUD_VERSION.to_le_bytes());
    out.extend((cloud.len() as u64).to_le_bytes());
    for g in &cloud.gaussians {
        for v in g.to_params() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<GaussianCloud> {
    if bytes.len() < 16 || &bytes[..4] != CLOUD_MAGIC {
        return Err(Error::format("cloud", "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CLOUD_VERSION {
        return Err(Error::format("cloud", format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if Some(body.len()) != count.checked_mul(PARAMS_PER_GAUSSIAN * 8) {
        return Err(Error::format("cloud", format!("{} bytes for {count} Gaussians", body.len())));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let gaussians = values
        .chunks_exact(PARAMS_PER_GAUSSIAN)
        .map(Gaussian::from_params)
        .collect();
    GaussianCloud::new(gaussians)
}

pub fn save_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    fs::write(path, encode_cloud(cloud))?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    decode_cloud(&fs::read(path)?)
}
