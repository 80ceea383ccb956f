use super::{check_shape, DiffusionError, NoiseSchedule};
use ndarray::Array3;

/// A latent `(channels, h, w)` at training timestep `t` (0 = clean).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Array3<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn clean(z: Array3<f64>) -> Self {
        Self { z, t: 0 }
    }

    pub fn height(&self) -> usize {
        self.z.dim().1
    }

    pub fn width(&self) -> usize {
        self.z.dim().2
    }
}

/// Closed-form jump to step `t`: `sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_noise(
    z0: &LatentState,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Array3<f64>,
) -> Result<LatentState, DiffusionError> {
    if t == 0 || t > schedule.len() {
        return Err(DiffusionError::InvalidStep { step: t, max: schedule.len() });
    }
    check_shape(z0.z.shape(), eps.shape())?;
    let abar = schedule.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut z = z0.z.clone();
    z.zip_mut_with(eps, |zi, &e| *zi = a * *zi + b * e);
    Ok(LatentState { z, t })
}

/// Markov-chain route to step `t = eps_steps.len()`: applies
/// `z_s = sqrt(alpha_s) z_{s-1} + sqrt(beta_s) eps_s` for `s = 1..=t`.
pub fn forward_noise_chain(
    z0: &LatentState,
    schedule: &NoiseSchedule,
    eps_steps: &[Array3<f64>],
) -> Result<LatentState, DiffusionError> {
    let t = eps_steps.len();
    if t == 0 || t > schedule.len() {
        return Err(DiffusionError::InvalidStep { step: t, max: schedule.len() });
    }
    let mut z = z0.z.clone();
    for (s, eps) in (1..=t).zip(eps_steps) {
        check_shape(z.shape(), eps.shape())?;
        let (a, b) = (schedule.alpha(s).sqrt(), schedule.beta(s).sqrt());
        z.zip_mut_with(eps, |zi, &e| *zi = a * *zi + b * e);
    }
    Ok(LatentState { z, t })
}
