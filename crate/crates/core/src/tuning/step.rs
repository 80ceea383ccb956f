//! One optimization step of the 9-channel noise-prediction objective with
//! only the placeholder embedding and the LoRA adapters trainable.

use super::lora::LoraSet;
use super::text::{PlaceholderToken, TextEncoderClient};
use super::unet::ToyUnet;
use super::TuningError;
use crate::diffusion::{assemble_unet_input, forward_noise, ConditioningBundle, LatentState, NoiseSchedule};
use crate::raster::Mask;
use ndarray::{Array1, Array2, Array3};
use std::collections::BTreeMap;

/// One training record in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// Latent of the target image `I`, `(4, h, w)`.
    pub original_latent: Array3<f64>,
    /// Latent of the blended image with the erase region blanked.
    pub masked_latent: Array3<f64>,
    /// Latent-resolution erase mask.
    pub mask: Mask,
    pub simple_prompt: String,
    pub caption_prompt: String,
}

impl TrainSample {
    pub fn validate(&self) -> Result<(), TuningError> {
        let (_, h, w) = self.original_latent.dim();
        if self.masked_latent.dim() != self.original_latent.dim() || self.mask.dims() != (h, w) {
            return Err(TuningError::ShapeMismatch(format!(
                "latent {:?}, masked {:?}, mask {:?}",
                self.original_latent.dim(),
                self.masked_latent.dim(),
                self.mask.dims()
            )));
        }
        if self.simple_prompt.trim().is_empty() || self.caption_prompt.trim().is_empty() {
            return Err(TuningError::CorruptDataset("empty prompt".into()));
        }
        Ok(())
    }

    /// Prompt chosen by the 50/50 mixing rule for uniform draw `u`.
    pub fn prompt(&self, u: f64) -> &str {
        super::prompt_mix(&self.simple_prompt, &self.caption_prompt, u)
    }
}

/// Injected timestep and noise for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Array3<f64>,
}

/// Everything the optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableState {
    pub token: PlaceholderToken,
    pub lora: LoraSet,
}

impl TrainableState {
    pub fn parameter_count(&self) -> usize {
        self.token.embedding.len() + self.lora.parameter_count()
    }

    /// `[v_*, adapters...]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.token.embedding.to_vec();
        v.extend(self.lora.flatten());
        v
    }

    pub fn unflatten_from(&mut self, values: &[f64]) {
        let d = self.token.embedding.len();
        self.token.embedding.assign(&Array1::from(values[..d].to_vec()));
        self.lora.unflatten_from(&values[d..]);
    }
}

pub const PLACEHOLDER_PARAM: &str = "placeholder.embedding";
pub const EMBEDDING_TABLE_PARAM: &str = "text.embedding_table";

/// Gradient for every parameter of the model, keyed by name. Frozen tensors
/// are present with exact zeros.
#[derive(Clone, Debug, Default)]
pub struct GradientSet {
    pub named: BTreeMap<String, Vec<f64>>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.named.get(name).map(Vec::as_slice)
    }

    pub fn nonzero_parameters(&self) -> Vec<&str> {
        self.named
            .iter()
            .filter(|(_, g)| g.iter().any(|&v| v != 0.0))
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn is_trainable(name: &str) -> bool {
        name == PLACEHOLDER_PARAM || name.starts_with("lora.")
    }

    /// Trainable gradients in [`TrainableState::flatten`] order.
    pub fn flatten_trainable(&self, state: &TrainableState) -> Vec<f64> {
        let mut v = self.named[PLACEHOLDER_PARAM].clone();
        for a in &state.lora.adapters {
            let id = a.target.layer_id();
            v.extend(&self.named[&format!("lora.{id}.down")]);
            v.extend(&self.named[&format!("lora.{id}.up")]);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: GradientSet,
}

/// Mean squared error between predicted and injected noise.
pub fn epsilon_mse(pred: &Array3<f64>, eps: &Array3<f64>) -> f64 {
    (pred - eps).mapv(|d| d * d).mean().unwrap_or(0.0)
}

/// Everything a step needs besides the batch.
pub struct StepContext<'a> {
    pub model: &'a ToyUnet,
    pub encoder: &'a dyn TextEncoderClient,
    pub schedule: &'a NoiseSchedule,
}

/// Mean squared error between injected and predicted noise over a batch,
/// and its gradient. `prompts[i]` is the prompt used for `batch[i]`.
pub fn training_step(
    ctx: &StepContext<'_>,
    state: &TrainableState,
    batch: &[&TrainSample],
    prompts: &[&str],
    draws: &[NoiseDraw],
) -> Result<StepOutput, TuningError> {
    if batch.is_empty() || batch.len() != prompts.len() || batch.len() != draws.len() {
        return Err(TuningError::ShapeMismatch(format!(
            "{} samples, {} prompts, {} draws",
            batch.len(),
            prompts.len(),
            draws.len()
        )));
    }
    let table = state.token.install(ctx.encoder.table());
    let mut table_grad = Array2::<f64>::zeros(table.dim());
    let mut adapter_grads: Vec<(Array2<f64>, Array2<f64>)> = state
        .lora
        .adapters
        .iter()
        .map(|a| (Array2::zeros(a.down.dim()), Array2::zeros(a.up.dim())))
        .collect();
    let mut loss = 0.0;
    let nb = batch.len() as f64;
    for ((sample, prompt), draw) in batch.iter().zip(prompts).zip(draws) {
        sample.validate()?;
        let z_t = forward_noise(&LatentState::clean(sample.original_latent.clone()), draw.t, ctx.schedule, &draw.eps)?;
        let ids = ctx.encoder.tokenize(prompt);
        let text = ctx.encoder.encode_with(prompt, &table);
        let cond = ConditioningBundle::new(sample.masked_latent.clone(), &sample.mask, text.clone());
        let input = assemble_unet_input(&z_t, &cond)?;
        let (pred, cache) = ctx.model.forward(&input, draw.t, &text, &state.lora, None)?;
        let diff = &pred - &draw.eps;
        let n = diff.len() as f64;
        loss += diff.mapv(|d| d * d).sum() / n / nb;
        let grad_eps = diff * (2.0 / n / nb);
        let g = ctx.model.backward(&cache, &grad_eps, &state.lora);
        for (row, &id) in ids.iter().enumerate() {
            let mut r = table_grad.row_mut(id);
            r += &g.text.row(row);
        }
        for (acc, (gd, gu)) in adapter_grads.iter_mut().zip(g.adapters) {
            acc.0 += &gd;
            acc.1 += &gu;
        }
    }
    if !loss.is_finite() {
        return Err(TuningError::NonFiniteLoss(loss));
    }

    let mut named = BTreeMap::new();
    let slot = state.token.slot;
    let placeholder = if state.token.trainable {
        table_grad.row(slot).to_vec()
    } else {
        vec![0.0; table.ncols()]
    };
    named.insert(PLACEHOLDER_PARAM.to_string(), placeholder);
    // every other vocabulary row is frozen
    named.insert(EMBEDDING_TABLE_PARAM.to_string(), vec![0.0; table.len()]);
    for (a, (gd, gu)) in state.lora.adapters.iter().zip(adapter_grads) {
        let id = a.target.layer_id();
        named.insert(format!("lora.{id}.down"), gd.into_raw_vec_and_offset().0);
        named.insert(format!("lora.{id}.up"), gu.into_raw_vec_and_offset().0);
    }
    for (name, size) in ctx.model.frozen_parameter_sizes() {
        named.insert(format!("unet.{name}"), vec![0.0; size]);
    }
    Ok(StepOutput { loss, grads: GradientSet { named } })
}

/// Loss only, at fixed draws (used for before/after comparisons and
/// finite differences).
pub fn evaluate_loss(
    ctx: &StepContext<'_>,
    state: &TrainableState,
    batch: &[&TrainSample],
    prompts: &[&str],
    draws: &[NoiseDraw],
) -> Result<f64, TuningError> {
    let table = state.token.install(ctx.encoder.table());
    let mut loss = 0.0;
    for ((sample, prompt), draw) in batch.iter().zip(prompts).zip(draws) {
        let z_t = forward_noise(&LatentState::clean(sample.original_latent.clone()), draw.t, ctx.schedule, &draw.eps)?;
        let text = ctx.encoder.encode_with(prompt, &table);
        let cond = ConditioningBundle::new(sample.masked_latent.clone(), &sample.mask, text.clone());
        let input = assemble_unet_input(&z_t, &cond)?;
        let (pred, _) = ctx.model.forward(&input, draw.t, &text, &state.lora, None)?;
        loss += epsilon_mse(&pred, &draw.eps) / batch.len() as f64;
    }
    Ok(loss)
}
