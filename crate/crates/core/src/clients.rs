//! Process-boundary interfaces to the external models the pipeline drives.
//!
//! Every client is called from a single driving thread at a time but must be
//! shareable across threads so a service can own one set per worker.

use crate::panoptic::Segment;
use crate::raster::{Mask, Rgb8Image};
use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("client unavailable: {0}")]
    Unavailable(String),
    #[error("client call failed: {0}")]
    Failed(String),
}

/// Pixel-space inpainter used to pre-fill the erase region.
/// Must return an image with the same dimensions as its input.
pub trait CoarseInpainterClient: Send + Sync {
    fn inpaint(&self, image: &Rgb8Image, mask: &Mask) -> Result<Rgb8Image, ClientError>;
}

/// Latent autoencoder. Latents are `(channels, h / 8, w / 8)`.
pub trait VaeClient: Send + Sync {
    fn encode(&self, image: &Rgb8Image) -> Result<Array3<f64>, ClientError>;
    fn decode(&self, latent: &Array3<f64>) -> Result<Rgb8Image, ClientError>;

    fn downscale(&self) -> usize {
        8
    }

    /// Symmetric bound on latent values, when the decoder has one. Samplers
    /// clip their clean-latent estimate to it.
    fn latent_range(&self) -> Option<f64> {
        None
    }
}

/// Panoptic segmenter; deterministic per image.
pub trait SegmenterClient: Send + Sync {
    fn panoptic(&self, image: &Rgb8Image) -> Result<Vec<Segment>, ClientError>;
}

/// Vision-language captioner.
pub trait VlmClient: Send + Sync {
    fn describe(&self, image: &Rgb8Image, prompt: &str) -> Result<String, ClientError>;
}

/// Deep-feature backend for FID and LPIPS.
pub trait FeatureExtractorClient: Send + Sync {
    fn embed(&self, images: &[Rgb8Image]) -> Result<Vec<Vec<f64>>, ClientError>;
    fn perceptual_distance(&self, a: &Rgb8Image, b: &Rgb8Image) -> Result<f64, ClientError>;

    /// Recorded in evaluation reports.
    fn identifier(&self) -> String;
}
