use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Mat;

/// A latent image. Stored token-major: row `y·width + x` holds the
/// `channels` values of latent pixel `(x, y)`, which is the layout the
/// denoiser consumes directly.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage {
    height: usize,
    width: usize,
    tokens: Mat,
}

impl LatentImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            tokens: Mat::zeros(height * width, channels),
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Self {
        Self {
            height,
            width,
            tokens: Mat::filled(height * width, channels, v),
        }
    }

    pub fn from_tokens(height: usize, width: usize, tokens: Mat) -> Result<Self> {
        if tokens.rows() != height * width {
            return Err(Error::Shape(format!(
                "{} tokens for a {height}x{width} latent",
                tokens.rows()
            )));
        }
        Ok(Self {
            height,
            width,
            tokens,
        })
    }

    pub fn from_token_data(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tokens(height, width, Mat::from_vec(height * width, channels, data)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tokens.get(y * self.width + x, c)
    }

    pub fn tokens(&self) -> &Mat {
        &self.tokens
    }

    pub fn into_tokens(self) -> Mat {
        self.tokens
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.is_finite()
    }
}

/// Lossless space-to-depth codec with patch size `p`: an `H×W×C` image
/// becomes an `(H/p)×(W/p)` latent with `C·p²` channels. Channel
/// `(dy·p + dx)·C + k` of latent pixel `(x, y)` is image channel `k` at
/// `(p·x + dx, p·y + dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyAutoencoder {
    patch: usize,
}

impl ToyAutoencoder {
    pub fn new(patch: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::InvalidParameter("patch size must be positive".into()));
        }
        Ok(Self { patch })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.patch * self.patch
    }

    pub fn encode(&self, image: &Image) -> Result<LatentImage> {
        let p = self.patch;
        let (w, h, c) = image.dims();
        if w % p != 0 || h % p != 0 {
            return Err(Error::Shape(format!(
                "{w}x{h} image is not divisible by patch size {p}"
            )));
        }
        let (lw, lh) = (w / p, h / p);
        let lc = c * p * p;
        let mut tokens = Mat::zeros(lw * lh, lc);
        for ly in 0..lh {
            for lx in 0..lw {
                let row = tokens.row_mut(ly * lw + lx);
                for dy in 0..p {
                    for dx in 0..p {
                        let px = image.pixel(p * lx + dx, p * ly + dy);
                        let base = (dy * p + dx) * c;
                        row[base..base + c].copy_from_slice(px);
                    }
                }
            }
        }
        LatentImage::from_tokens(lh, lw, tokens)
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<Image> {
        let p = self.patch;
        let lc = latent.channels();
        if lc % (p * p) != 0 {
            return Err(Error::Shape(format!(
                "{lc} latent channels are not a multiple of {}",
                p * p
            )));
        }
        let c = lc / (p * p);
        let (lw, lh) = (latent.width(), latent.height());
        let mut image = Image::new(lw * p, lh * p, c);
        for ly in 0..lh {
            for lx in 0..lw {
                let row = latent.tokens().row(ly * lw + lx);
                for dy in 0..p {
                    for dx in 0..p {
                        let base = (dy * p + dx) * c;
                        image
                            .pixel_mut(p * lx + dx, p * ly + dy)
                            .copy_from_slice(&row[base..base + c]);
                    }
                }
            }
        }
        Ok(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_round_trip() {
        let ae = ToyAutoencoder::new(2).unwrap();
        let img = Image::from_vec(4, 4, 3, (0..48).map(f64::from).collect()).unwrap();
        let z = ae.encode(&img).unwrap();
        assert_eq!(z.dims(), (12, 2, 2));
        assert_eq!(ae.decode(&z).unwrap(), img);
        // channel (dy·p + dx)·C + k of latent (1, 0) is image (2 + dx, dy)
        assert_eq!(z.get(3 + 1, 0, 1), img.get(3, 0, 1));
    }

    #[test]
    fn constant_image_constant_latent() {
        let ae = ToyAutoencoder::new(2).unwrap();
        let z = ae.encode(&Image::filled(4, 6, 3, 0.3)).unwrap();
        assert!(z.tokens().data().iter().all(|v| *v == 0.3));
    }

    #[test]
    fn random_round_trip_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Image::from_vec(8, 8, 3, (0..192).map(|_| rng.random::<f64>()).collect()).unwrap();
        let ae = ToyAutoencoder::new(2).unwrap();
        let back = ae.decode(&ae.encode(&img).unwrap()).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(max_err, 0.0);
    }

    #[test]
    fn rejects_indivisible() {
        let ae = ToyAutoencoder::new(2).unwrap();
        assert!(matches!(ae.encode(&Image::new(3, 4, 3)), Err(Error::Shape(_))));
        assert!(ToyAutoencoder::new(0).is_err());
    }
}
