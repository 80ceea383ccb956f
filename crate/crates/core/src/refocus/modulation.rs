use super::{Label, LabelMap, RefocusConfig, RefocusError};
use ndarray::{Array2, Axis, Zip};

/// Query-key pair masks. `pos[i, j]` is set when
/// `(l[i] = m and l[j] = p) or (l[i] = p and l[j] in {m, p})`;
/// `neg[i, j]` when `(l[i] = m and l[j] in {m, n}) or (l[i] = n and l[j] = m)`.
pub fn build_pair_masks(lm: &LabelMap) -> (Array2<bool>, Array2<bool>) {
    use Label::*;
    let labels = lm.labels();
    let n = labels.len();
    let pos = Array2::from_shape_fn((n, n), |(i, j)| {
        matches!((labels[i], labels[j]), (Mask, Positive) | (Positive, Mask) | (Positive, Positive))
    });
    let neg = Array2::from_shape_fn((n, n), |(i, j)| {
        matches!((labels[i], labels[j]), (Mask, Mask) | (Mask, Negative) | (Negative, Mask))
    });
    (pos, neg)
}

/// Per-query weights from raw scores: with row extremes broadcast along the
/// key axis, `w_pos = (1 - lp) * s_min + lp * s_max` and `w_neg = ln * s_max`.
pub fn modulation_weights(scores: &Array2<f64>, cfg: &RefocusConfig) -> (Array2<f64>, Array2<f64>) {
    let (n, k) = scores.dim();
    let mut w_pos = Array2::zeros((n, k));
    let mut w_neg = Array2::zeros((n, k));
    for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
        let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let pos = (1.0 - cfg.lambda_pos) * lo + cfg.lambda_pos * hi;
        let neg = cfg.lambda_neg * hi;
        w_pos.row_mut(i).fill(pos);
        w_neg.row_mut(i).fill(neg);
    }
    (w_pos, w_neg)
}

/// The additive logit matrix for one attention map together with its parts.
#[derive(Clone, Debug)]
pub struct AttentionModulation {
    pub mask_pos: Array2<bool>,
    pub mask_neg: Array2<bool>,
    pub w_pos: Array2<f64>,
    pub w_neg: Array2<f64>,
    /// `w_pos * mask_pos - w_neg * mask_neg`, elementwise.
    pub m: Array2<f64>,
}

impl AttentionModulation {
    pub fn new(lm: &LabelMap, scores: &Array2<f64>, cfg: &RefocusConfig) -> Result<Self, RefocusError> {
        let n = lm.len();
        if scores.dim() != (n, n) {
            return Err(RefocusError::ShapeMismatch(format!(
                "scores {:?} for {n} labelled tokens",
                scores.dim()
            )));
        }
        let (mask_pos, mask_neg) = build_pair_masks(lm);
        Ok(Self::from_parts(mask_pos, mask_neg, modulation_weights(scores, cfg)))
    }

    pub fn from_parts(
        mask_pos: Array2<bool>,
        mask_neg: Array2<bool>,
        (w_pos, w_neg): (Array2<f64>, Array2<f64>),
    ) -> Self {
        let mut m = Array2::zeros(w_pos.dim());
        Zip::from(&mut m)
            .and(&mask_pos)
            .and(&mask_neg)
            .and(&w_pos)
            .and(&w_neg)
            .for_each(|m, &p, &n, &wp, &wn| {
                *m = if p { wp } else { 0.0 } - if n { wn } else { 0.0 };
            });
        Self { mask_pos, mask_neg, w_pos, w_neg, m }
    }

    /// No-op modulation for `n` tokens.
    pub fn zeros(n: usize) -> Self {
        let f = Array2::from_elem((n, n), false);
        Self::from_parts(f.clone(), f, (Array2::zeros((n, n)), Array2::zeros((n, n))))
    }
}

/// Row softmax of `(scores + bias) / sqrt(d)`.
pub fn attention_probs(scores: &Array2<f64>, bias: Option<&Array2<f64>>, d: usize) -> Array2<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = match bias {
        Some(b) => scores + b,
        None => scores.clone(),
    };
    for mut row in logits.axis_iter_mut(Axis(0)) {
        row.mapv_inplace(|v| v * scale);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

/// `softmax((q k^T + M) / sqrt(d))`, with `M` added before the scaling.
pub fn refocused_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    modulation: &AttentionModulation,
    d: usize,
) -> Result<Array2<f64>, RefocusError> {
    let (n, dq) = q.dim();
    let (nk, dk) = k.dim();
    if d == 0 || dq != d || dk != d {
        return Err(RefocusError::ShapeMismatch(format!("q {:?}, k {:?}, d = {d}", q.dim(), k.dim())));
    }
    if modulation.m.dim() != (n, nk) {
        return Err(RefocusError::ShapeMismatch(format!(
            "modulation {:?} for {n}x{nk} attention",
            modulation.m.dim()
        )));
    }
    let scores = q.dot(&k.t());
    Ok(attention_probs(&scores, Some(&modulation.m), d))
}
