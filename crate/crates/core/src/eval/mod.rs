//! Evaluation protocol: bring every image to 512x512 (long side scaled,
//! short side zero padded), then score results against references with
//! PSNR, SSIM, LPIPS and FID.

mod metrics;
mod report;

pub use metrics::{fid, lpips, psnr, resize_pad_512, ssim, validate_extractor, EVAL_SIZE, PSNR_CAP_DB};
pub use report::{evaluate, AggregateMetrics, MetricsReport, MissingPair, PairMetrics};

use crate::clients::ClientError;
use crate::raster::RasterError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("image has a zero dimension")]
    DegenerateImage,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(ClientError),
    #[error("feature extractor misbehaves: {0}")]
    ExtractorInvalid(String),
    #[error("need at least two feature vectors per set, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
