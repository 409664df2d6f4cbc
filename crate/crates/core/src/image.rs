//! Float images plus binary PPM (P6, 8-bit) and little-endian PFM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Row-major `height × width × channels` image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Mean of squared differences over every sample.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(Error::Shape(format!(
                "comparing {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// Broadcasts a single-channel image to three channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Image::new(self.width, self.height, 3);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y, 0);
                out.pixel_mut(x, y).fill(v);
            }
        }
        out
    }

    /// SHA-256 of the canonical encoding: width, height, channels as
    /// little-endian `u32`, then every sample as a little-endian `f64`.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.width as u32).to_le_bytes());
        h.update((self.height as u32).to_le_bytes());
        h.update((self.channels as u32).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    /// Binary PPM (P6), samples clamped to `[0, 1]` and rounded to 8 bits.
    /// Single-channel images are written as gray RGB.
    pub fn encode_ppm(&self) -> Vec<u8> {
        let rgb = self.to_rgb();
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(rgb.data.iter().map(|v| quantize(*v)));
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let (header, body) = split_header(bytes, 4, "ppm")?;
        if header[0] != "P6" {
            return Err(Error::format("ppm", format!("magic {}", header[0])));
        }
        let width = parse_dim(&header[1], "ppm")?;
        let height = parse_dim(&header[2], "ppm")?;
        if header[3] != "255" {
            return Err(Error::format("ppm", "only 8-bit samples are supported"));
        }
        if body.len() != width * height * 3 {
            return Err(Error::format(
                "ppm",
                format!("expected {} bytes of pixels, found {}", width * height * 3, body.len()),
            ));
        }
        let data = body.iter().map(|b| f64::from(*b) / 255.0).collect();
        Image::from_vec(width, height, 3, data)
    }

    /// Little-endian PFM (`PF` for RGB, `Pf` for gray), rows stored bottom-up.
    pub fn encode_pfm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            3 => "PF",
            1 => "Pf",
            c => return Err(Error::Shape(format!("PFM cannot store {c} channels"))),
        };
        let mut out = format!("{magic}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            let start = y * self.width * self.channels;
            for v in &self.data[start..start + self.width * self.channels] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
        let (header, body) = split_header(bytes, 4, "pfm")?;
        let channels = match header[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            m => return Err(Error::format("pfm", format!("magic {m}"))),
        };
        let width = parse_dim(&header[1], "pfm")?;
        let height = parse_dim(&header[2], "pfm")?;
        let scale: f64 = header[3]
            .parse()
            .map_err(|_| Error::format("pfm", "bad scale"))?;
        if scale >= 0.0 {
            return Err(Error::format("pfm", "only little-endian files are supported"));
        }
        let n = width * height * channels;
        if body.len() != n * 4 {
            return Err(Error::format("pfm", "truncated pixel data"));
        }
        let mut data = vec![0.0; n];
        let row_len = width * channels;
        for (file_row, chunk) in body.chunks_exact(row_len * 4).enumerate() {
            let y = height - 1 - file_row;
            for (i, b) in chunk.chunks_exact(4).enumerate() {
                data[y * row_len + i] = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
        }
        Image::from_vec(width, height, channels, data)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_ppm())
    }

    pub fn load_ppm(path: &Path) -> Result<Image> {
        Image::decode_ppm(&fs::read(path)?)
    }

    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_pfm()?)
    }

    pub fn load_pfm(path: &Path) -> Result<Image> {
        Image::decode_pfm(&fs::read(path)?)
    }

    /// Keeps the first channel.
    pub fn to_gray(&self) -> Image {
        let mut out = Image::new(self.width, self.height, 1);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, 0, self.get(x, y, 0));
            }
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn parse_dim(s: &str, what: &'static str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::format(what, format!("bad dimension {s:?}")))
}

/// Splits `count` whitespace-separated header tokens (skipping `#` comments)
/// from the binary body that follows a single whitespace byte.
fn split_header<'a>(bytes: &'a [u8], count: usize, what: &'static str) -> Result<(Vec<String>, &'a [u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(what, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(what, "missing pixel data"));
    }
    Ok((tokens, &bytes[i + 1..]))
}

pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_8bit_values() {
        let img = Image::from_vec(3, 2, 3, (0..18).map(|i| (i * 14) as f64 / 255.0).collect()).unwrap();
        let back = Image::decode_ppm(&img.encode_ppm()).unwrap();
        assert_eq!(back, img);
        assert!(Image::decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(Image::decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn pfm_round_trip_is_exact_for_f32_values() {
        let data: Vec<f64> = (0..12).map(|i| f64::from(i as f32 * 0.1f32 - 0.3)).collect();
        let img = Image::from_vec(2, 2, 3, data).unwrap();
        assert_eq!(Image::decode_pfm(&img.encode_pfm().unwrap()).unwrap(), img);
        let gray = Image::from_vec(3, 1, 1, vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(Image::decode_pfm(&gray.encode_pfm().unwrap()).unwrap(), gray);
    }

    #[test]
    fn content_hash_distinguishes_shape() {
        let a = Image::new(2, 3, 1);
        let b = Image::new(3, 2, 1);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), Image::new(2, 3, 1).content_hash());
    }
}
