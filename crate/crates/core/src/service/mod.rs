//! The end-to-end erase pipeline and the persistent job queue in front of it.

mod composite;
mod jobs;
mod model;
mod pipeline;
mod store;

pub use composite::{feather_composite, feather_weights, FEATHER_PX};
pub use jobs::{JobService, ServiceOptions};
pub use model::{EraserClients, EraserModel, ModelConfig, MODEL_CONFIG_FILE};
pub use pipeline::{Eraser, MAX_INPUT_SIDE};
pub use store::{JobFailure, JobRecord, JobStatus, JobStore, StoreEvent};

use crate::refocus::RefocusConfig;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Pipeline stage a failure is attributed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Segment,
    Init,
    Encode,
    Denoise,
    Decode,
    Composite,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Segment => "segment",
            Stage::Init => "init",
            Stage::Encode => "encode",
            Stage::Denoise => "denoise",
            Stage::Decode => "decode",
            Stage::Composite => "composite",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EraseConfig {
    /// Fraction of the sampling chain that is re-run, in (0, 1].
    pub strength: f64,
    /// Sampling steps covering the full chain; `strength` selects a tail.
    pub inference_steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub negative_prompt: String,
    pub refocus: RefocusConfig,
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            strength: crate::diffusion::DEFAULT_STRENGTH,
            inference_steps: 50,
            guidance_scale: 7.5,
            seed: 0,
            negative_prompt: String::new(),
            refocus: RefocusConfig::default(),
        }
    }
}

impl EraseConfig {
    pub fn validate(&self) -> Result<(), EraseError> {
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(EraseError::InvalidConfig(format!("strength {} outside (0, 1]", self.strength)));
        }
        if self.inference_steps == 0 {
            return Err(EraseError::InvalidConfig("inference_steps must be at least 1".into()));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(EraseError::InvalidConfig(format!("guidance scale {}", self.guidance_scale)));
        }
        self.refocus.validate().map_err(|e| EraseError::InvalidConfig(e.to_string()))
    }

    pub fn hash(&self) -> String {
        crate::tuning::config_hash(self)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EraseError {
    #[error("erase mask is empty")]
    EmptyMask,
    #[error("input {width}x{height} exceeds the {limit} px long-side limit")]
    OversizeInput { width: u32, height: u32, limit: u32 },
    #[error("mask is {mask:?}, image is {image:?}")]
    ShapeMismatch { mask: (usize, usize), image: (usize, usize) },
    #[error("invalid erase config: {0}")]
    InvalidConfig(String),
    #[error("[{stage}] {message}")]
    StageFailure { stage: Stage, message: String },
}

impl EraseError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            EraseError::StageFailure { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    pub(crate) fn at(stage: Stage, e: impl fmt::Display) -> Self {
        EraseError::StageFailure { stage, message: e.to_string() }
    }
}

#[derive(Debug, Error)]
pub enum JobError {
    #[error("job {0} not found")]
    NotFound(String),
    #[error("queue is full ({0} jobs waiting)")]
    QueueFull(usize),
    #[error("rejected: {0}")]
    Rejected(EraseError),
    #[error("job store: {0}")]
    Store(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
