use super::TuningError;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Attention projection an adapter attaches to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Out,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Out];

    pub fn layer_id(&self) -> &'static str {
        match self {
            LoraTarget::Query => "attn1.to_q",
            LoraTarget::Key => "attn1.to_k",
            LoraTarget::Value => "attn1.to_v",
            LoraTarget::Out => "attn1.to_out",
        }
    }
}

/// Low-rank update `scale * up . down` on a frozen `(d_out, d_in)` weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    /// `(rank, d_in)`
    pub down: Array2<f64>,
    /// `(d_out, rank)`
    pub up: Array2<f64>,
    pub scale: f64,
}

impl LoraAdapter {
    /// `down` is standard Gaussian, `up` starts at zero so the adapted layer
    /// initially equals the base layer.
    pub fn init(target: LoraTarget, d_in: usize, d_out: usize, rank: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        Self {
            target,
            down: Array2::from_shape_fn((rank, d_in), |_| normal.sample(rng)),
            up: Array2::zeros((d_out, rank)),
            scale,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.down.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.up.nrows()
    }

    /// `rank * (d_in + d_out)`.
    pub fn parameter_count(&self) -> usize {
        self.down.len() + self.up.len()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.up.dot(&self.down) * self.scale
    }
}

pub fn apply_lora(base: &Array2<f64>, adapter: &LoraAdapter) -> Result<Array2<f64>, TuningError> {
    if adapter.up.ncols() != adapter.down.nrows() || base.dim() != (adapter.d_out(), adapter.d_in()) {
        return Err(TuningError::ShapeMismatch(format!(
            "base {:?}, up {:?}, down {:?}",
            base.dim(),
            adapter.up.dim(),
            adapter.down.dim()
        )));
    }
    Ok(base + &adapter.delta())
}

/// Adapters for one model, at most one per target.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// One adapter on every attention projection of a `width x width` block.
    pub fn for_attention(width: usize, rank: usize, scale: f64, rng: &mut impl Rng) -> Self {
        Self {
            adapters: LoraTarget::ALL
                .iter()
                .map(|&t| LoraAdapter::init(t, width, width, rank, scale, rng))
                .collect(),
        }
    }

    pub fn get(&self, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Base weight with its adapter (if any) folded in.
    pub fn effective(&self, target: LoraTarget, base: &Array2<f64>) -> Result<Array2<f64>, TuningError> {
        match self.get(target) {
            Some(a) => apply_lora(base, a),
            None => Ok(base.clone()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::parameter_count).sum()
    }

    /// Flatten as `[down, up]` per adapter, in adapter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for a in &self.adapters {
            v.extend(a.down.iter());
            v.extend(a.up.iter());
        }
        v
    }

    pub fn unflatten_from(&mut self, values: &[f64]) {
        let mut it = values.iter().copied();
        for a in &mut self.adapters {
            a.down.iter_mut().for_each(|x| *x = it.next().expect("enough values"));
            a.up.iter_mut().for_each(|x| *x = it.next().expect("enough values"));
        }
    }
}
