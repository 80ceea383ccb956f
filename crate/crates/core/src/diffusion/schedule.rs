use super::DiffusionError;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    /// Betas evenly spaced between the endpoints.
    Linear,
    /// Square roots of the betas evenly spaced (Stable Diffusion style).
    ScaledLinear,
}

/// Variance schedule over `t = 1..=T`.
///
/// `alpha_bar(0)` is defined as `1.0` so the final sampler step lands on the
/// clean sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

pub fn build_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: BetaKind,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let betas = (0..steps)
        .map(|i| match kind {
            BetaKind::Linear => lerp(beta_start, beta_end, i),
            BetaKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Number of sampling steps actually run for strength `s`: `floor(T * s)`,
/// never less than one.
pub fn steps_from_strength(total: usize, strength: f64) -> Result<usize, DiffusionError> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(DiffusionError::InvalidStrength(strength));
    }
    if total == 0 {
        return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
    }
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    Ok(((total as f64 * strength + 1e-9).floor() as usize).max(1))
}
