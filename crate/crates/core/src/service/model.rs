use crate::clients::{CoarseInpainterClient, SegmenterClient, VaeClient};
use crate::diffusion::{build_schedule, BetaKind, NoiseSchedule};
use crate::toy::{MeanFillInpainter, PaletteSegmenter, ToyVae};
use crate::tuning::{
    Checkpoint, DirCheckpointSink, LoraSet, PlaceholderToken, TextEncoderClient, ToyTextEncoder, ToyUnet, ToyUnetConfig,
    TuningError,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Name of the model description file inside a model directory.
pub const MODEL_CONFIG_FILE: &str = "model.json";

/// What a model directory describes besides the trained checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub unet: ToyUnetConfig,
    pub text_seed: u64,
}

impl ModelConfig {
    /// `model.json` under `dir`, or the defaults when it is absent.
    pub fn load(dir: &Path) -> Result<Self, TuningError> {
        let path = dir.join(MODEL_CONFIG_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| TuningError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), TuningError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MODEL_CONFIG_FILE), serde_json::to_string_pretty(self).expect("model config serializes"))?;
        Ok(())
    }
}

/// Frozen denoiser and text encoder plus the tuned token and adapters.
pub struct EraserModel {
    pub unet: ToyUnet,
    pub lora: LoraSet,
    pub token: PlaceholderToken,
    pub encoder: Box<dyn TextEncoderClient>,
    pub schedule: NoiseSchedule,
}

impl EraserModel {
    /// Untuned toy model: placeholder at its initializer, no adapters.
    pub fn toy(unet: ToyUnetConfig, text_seed: u64) -> Self {
        let encoder = ToyTextEncoder::new(unet.text_width, text_seed);
        let token = PlaceholderToken::seeded(&encoder, encoder.placeholder_slot());
        let schedule = build_schedule(unet.train_timesteps, 0.00085, 0.012, BetaKind::ScaledLinear)
            .expect("constant schedule bounds are valid");
        Self { unet: ToyUnet::new(unet), lora: LoraSet::empty(), token, encoder: Box::new(encoder), schedule }
    }

    pub fn with_checkpoint(mut self, ckpt: &Checkpoint) -> Self {
        self.token = ckpt.placeholder.clone();
        self.lora = ckpt.adapters.clone();
        self
    }

    /// Load `model.json` (defaults when absent) and the newest
    /// `step-*.json` checkpoint, if any, from `dir`.
    pub fn load(dir: &Path) -> Result<Self, TuningError> {
        let cfg = ModelConfig::load(dir)?;
        let model = Self::toy(cfg.unet, cfg.text_seed);
        match DirCheckpointSink::new(dir).latest()? {
            Some(path) => {
                log::info!("loading tuned weights from {}", path.display());
                Ok(model.with_checkpoint(&Checkpoint::load(&path)?))
            }
            None => Ok(model),
        }
    }
}

/// External models driven by the pipeline.
#[derive(Clone)]
pub struct EraserClients {
    pub segmenter: Arc<dyn SegmenterClient>,
    pub inpainter: Arc<dyn CoarseInpainterClient>,
    pub vae: Arc<dyn VaeClient>,
}

impl EraserClients {
    pub fn toy() -> Self {
        Self {
            segmenter: Arc::new(PaletteSegmenter::default()),
            inpainter: Arc::new(MeanFillInpainter),
            vae: Arc::new(ToyVae),
        }
    }
}
