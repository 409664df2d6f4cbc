//! Multi-view consistent garment editing at desk scale.
//!
//! A synthetic clothed body is rendered from many cameras, the views are
//! edited jointly by a small latent-diffusion denoiser whose self-attention
//! couples views through a camera-rotation correlation matrix, and the
//! edited views are lifted back to 3D by fitting a Gaussian-splat cloud.

pub mod autodiff;
pub mod camera;
pub mod diffusion;
pub mod error;
pub mod geom;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod mvattn;
pub mod splat;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
