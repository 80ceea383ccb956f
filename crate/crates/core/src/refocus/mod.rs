//! Semantics-aware self-attention refocus.
//!
//! Every latent pixel gets a label (mask / positive / negative). Query-key
//! pairs are then split into pairs whose attention should grow (masked
//! queries reading background keys) and pairs whose attention should shrink
//! (masked queries reading object-like or other masked keys), and an additive
//! logit bias is built from per-query score extremes.

mod hook;
mod labels;
mod modulation;

pub use hook::RefocusHook;
pub use labels::{
    build_label_map, default_negative_rule, downsample_label_map, Label, LabelMap, NegativeRule,
};
pub use modulation::{
    attention_probs, build_pair_masks, modulation_weights, refocused_attention, AttentionModulation,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RefocusError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target grid {target_h}x{target_w} larger than source {source_h}x{source_w}")]
    InvalidTarget { target_h: usize, target_w: usize, source_h: usize, source_w: usize },
    #[error("invalid refocus config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefocusConfig {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub window_lo: f64,
    pub window_hi: f64,
    pub enabled: bool,
}

impl Default for RefocusConfig {
    fn default() -> Self {
        Self { lambda_pos: 0.8, lambda_neg: 1.0, window_lo: 0.7, window_hi: 1.0, enabled: true }
    }
}

impl RefocusConfig {
    pub fn validate(&self) -> Result<(), RefocusError> {
        if !(0.0..=1.0).contains(&self.lambda_pos) {
            return Err(RefocusError::InvalidConfig(format!("lambda_pos {} outside [0, 1]", self.lambda_pos)));
        }
        if self.lambda_neg.is_nan() || self.lambda_neg < 0.0 {
            return Err(RefocusError::InvalidConfig(format!("lambda_neg {} negative", self.lambda_neg)));
        }
        if !(0.0 <= self.window_lo && self.window_lo < self.window_hi && self.window_hi <= 1.0) {
            return Err(RefocusError::InvalidConfig(format!(
                "window [{}, {}] not within 0 <= lo < hi <= 1",
                self.window_lo, self.window_hi
            )));
        }
        Ok(())
    }
}

/// Both window ends are inclusive. `t_normalized` is 1 at the noisiest step.
pub fn window_active(t_normalized: f64, cfg: &RefocusConfig) -> bool {
    cfg.window_lo <= t_normalized && t_normalized <= cfg.window_hi
}
