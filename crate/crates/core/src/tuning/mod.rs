//! Background-completion tuning: a learned placeholder token found by
//! textual inversion, followed by LoRA fine-tuning of the attention
//! projections on the object-level dataset.

mod adam;
mod checkpoint;
mod dataset;
mod lora;
mod prompt;
mod step;
mod text;
mod trainer;
mod unet;

pub use adam::Adam;
pub use checkpoint::{
    config_hash, Checkpoint, CheckpointSink, DirCheckpointSink, MemoryCheckpointSink, CHECKPOINT_VERSION,
};
pub use dataset::{train_sample_from, DiskDataset, InMemoryDataset, TrainDataset};
pub use lora::{apply_lora, LoraAdapter, LoraSet, LoraTarget};
pub use prompt::{background_tags, build_simple_prompt, prompt_mix, BackgroundTag};
pub use step::{
    epsilon_mse, evaluate_loss, training_step, GradientSet, NoiseDraw, StepContext, StepOutput, TrainSample, TrainableState,
    EMBEDDING_TABLE_PARAM, PLACEHOLDER_PARAM,
};
pub use text::{PlaceholderToken, TextEncoderClient, ToyTextEncoder, INIT_WORDS, PLACEHOLDER};
pub use trainer::{
    block_means, draw_for_step, invert_placeholder, train, LogSink, MemorySink, Phase, StepRecord, TelemetrySink, TrainConfig,
    TrainOutcome, TrainRun,
};
pub use unet::{AdaptedUnet, BackwardGrads, ForwardCache, ToyUnet, ToyUnetConfig, INPUT_CHANNELS, LATENT_CHANNELS};

use crate::diffusion::{DenoiserError, DiffusionError};

#[derive(Debug, thiserror::Error)]
pub enum TuningError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no background tag available for the simple prompt")]
    NoBackgroundTag,
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("loss diverged at step {step} ({loss})")]
    DivergedLoss { step: u64, loss: f64 },
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error("could not write checkpoint {path}: {reason}")]
    CheckpointWriteFailure { path: String, reason: String },
    #[error("checkpoint incompatible: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("denoiser: {0}")]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
