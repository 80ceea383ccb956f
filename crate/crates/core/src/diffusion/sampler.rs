use super::{assemble_unet_input, ConditioningBundle, DiffusionError, LatentState, NoiseSchedule};
use ndarray::{Array2, Array3};
use thiserror::Error;

/// Identifies one attention layer inside the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSite {
    pub layer: usize,
    /// Token grid of the layer; `grid_h * grid_w` queries and keys.
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Plugged into every self-attention layer while the denoising loop runs.
pub trait AttentionHook: Send + Sync {
    /// Whether the hook applies at this normalized time (1 = noisiest).
    fn active(&self, t_normalized: f64) -> bool;

    /// Additive logit matrix for a layer, given its raw `QK^T` scores
    /// (before the `1/sqrt(d)` scaling). `None` leaves the layer untouched.
    fn modulation(&self, site: &AttentionSite, scores: &Array2<f64>) -> Option<Array2<f64>>;
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DenoiserError {
    #[error("bad denoiser input: {0}")]
    BadInput(String),
    #[error("{0}")]
    Failed(String),
}

/// An epsilon-prediction network over the 9-channel inpainting input.
pub trait EpsilonModel {
    fn predict(
        &self,
        unet_input: &Array3<f64>,
        t: usize,
        text: &Array2<f64>,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<Array3<f64>, DenoiserError>;
}

/// Deterministic DDIM (eta = 0) over an evenly strided subset of the
/// training timesteps.
#[derive(Clone, Debug)]
pub struct DdimSampler {
    schedule: NoiseSchedule,
    timesteps: Vec<usize>,
    x0_clip: Option<f64>,
}

impl DdimSampler {
    /// `inference_steps` is clamped to `[1, T]`.
    pub fn new(schedule: NoiseSchedule, inference_steps: usize) -> Self {
        let total = schedule.len();
        let n = inference_steps.clamp(1, total);
        let timesteps = (1..=n)
            .map(|k| ((k * total) as f64 / n as f64).round() as usize)
            .collect();
        Self { schedule, timesteps, x0_clip: None }
    }

    /// Clip the clean-latent estimate to `[-bound, bound]` at every step.
    pub fn with_x0_clip(mut self, bound: Option<f64>) -> Self {
        self.x0_clip = bound;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Ascending training timesteps visited by the sampler.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    pub fn inference_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Training timestep at which a run of `steps` sampling steps begins.
    pub fn start_timestep(&self, steps: usize) -> usize {
        if steps == 0 {
            0
        } else {
            self.timesteps[steps.min(self.timesteps.len()) - 1]
        }
    }

    /// One DDIM update from `t` to `t_prev` given predicted noise.
    pub fn step(&self, z: &Array3<f64>, eps: &Array3<f64>, t: usize, t_prev: usize) -> Array3<f64> {
        let abar = self.schedule.alpha_bar(t);
        let abar_prev = self.schedule.alpha_bar(t_prev);
        let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
        let (pa, pb) = (abar_prev.sqrt(), (1.0 - abar_prev).sqrt());
        let clip = self.x0_clip;
        let mut out = z.clone();
        out.zip_mut_with(eps, |zi, &e| {
            let mut x0 = (*zi - sb * e) / sa;
            if let Some(b) = clip {
                x0 = x0.clamp(-b, b);
            }
            *zi = pa * x0 + pb * e;
        });
        out
    }
}

/// Run the sampler from `z_init.t` down to 0. The hook is handed to the
/// denoiser only at steps where its window admits `t / T`.
pub fn denoise_loop(
    z_init: &LatentState,
    cond: &ConditioningBundle,
    sampler: &DdimSampler,
    denoiser: &dyn EpsilonModel,
    hook: Option<&dyn AttentionHook>,
) -> Result<LatentState, DiffusionError> {
    if z_init.t == 0 {
        return Ok(z_init.clone());
    }
    let grid = sampler.timesteps();
    let Some(pos) = grid.iter().position(|&t| t == z_init.t) else {
        return Err(DiffusionError::InvalidStep { step: z_init.t, max: sampler.schedule.len() });
    };
    let total = sampler.schedule.len() as f64;
    let mut z = z_init.z.clone();
    for k in (0..=pos).rev() {
        let t = grid[k];
        let t_prev = if k == 0 { 0 } else { grid[k - 1] };
        let state = LatentState { z, t };
        let input = assemble_unet_input(&state, cond)?;
        let step_hook = hook.filter(|h| h.active(t as f64 / total));
        let eps = denoiser
            .predict(&input, t, &cond.text_embedding, step_hook)
            .map_err(|source| DiffusionError::DenoiserFailure { step: t, source })?;
        super::check_shape(state.z.shape(), eps.shape())?;
        z = sampler.step(&state.z, &eps, t, t_prev);
    }
    Ok(LatentState { z, t: 0 })
}
