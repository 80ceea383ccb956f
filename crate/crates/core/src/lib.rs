//! Diffusion-based object erasure toolkit.
//!
//! The crate is organised around the erase pipeline and the pieces needed to
//! train and evaluate it:
//!
//! - [`diffusion`]: noise schedules, closed-form noising, 9-channel input
//!   assembly, content initialization and the DDIM denoising loop.
//! - [`refocus`]: semantic label maps and the additive self-attention
//!   modulation that steers masked queries toward background keys.
//! - [`tuning`]: the placeholder token, LoRA adapters, the toy denoiser and
//!   the trainer for the background-completion concept.
//! - [`olrd`]: object-level removal dataset construction.
//! - [`eval`]: resize/pad protocol and PSNR/SSIM/LPIPS/FID reporting.
//! - [`service`]: the end-to-end `erase` pipeline and the persistent job queue.
//!
//! External models (coarse inpainter, VAE, segmenter, captioner, feature
//! extractor) sit behind the traits in [`clients`]; [`toy`] provides
//! deterministic desk-scale implementations of each.

pub mod clients;
pub mod diffusion;
pub mod eval;
pub mod olrd;
pub mod panoptic;
pub mod raster;
pub mod refocus;
pub mod rle;
pub mod service;
pub mod toy;
pub mod tuning;

pub use raster::{Mask, Rgb8Image};
