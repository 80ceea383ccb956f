//! Noise schedules, closed-form noising, inpainting-input assembly, content
//! initialization and the deterministic denoising loop.

mod conditioning;
mod noising;
mod sampler;
mod schedule;

pub use conditioning::{assemble_unet_input, content_initialize, prefill, ConditioningBundle};
pub use noising::{forward_noise, forward_noise_chain, LatentState};
pub use sampler::{
    denoise_loop, AttentionHook, AttentionSite, DdimSampler, DenoiserError, EpsilonModel,
};
pub use schedule::{build_schedule, steps_from_strength, BetaKind, NoiseSchedule};

use crate::clients::ClientError;
use thiserror::Error;

/// Default denoising strength.
pub const DEFAULT_STRENGTH: f64 = 0.9;
/// Pixel-to-latent downscale of the autoencoder.
pub const LATENT_FACTOR: usize = 8;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("denoising strength {0} outside (0, 1]")]
    InvalidStrength(f64),
    #[error("step {step} outside [1, {max}]")]
    InvalidStep { step: usize, max: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("inpainter unavailable: {0}")]
    InpainterUnavailable(ClientError),
    #[error("encode failed: {0}")]
    EncodeFailure(ClientError),
    #[error("denoiser failed at step t={step}: {source}")]
    DenoiserFailure {
        step: usize,
        #[source]
        source: DenoiserError,
    },
}

pub(crate) fn check_shape(expected: &[usize], got: &[usize]) -> Result<(), DiffusionError> {
    if expected != got {
        return Err(DiffusionError::ShapeMismatch { expected: expected.to_vec(), got: got.to_vec() });
    }
    Ok(())
}
