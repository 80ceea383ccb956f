//! Desk-scale inpainting denoiser with a hand-derived backward pass.
//!
//! Layout (tokens are latent pixels in row-major order):
//!
//! ```text
//! x (9,H,W) -> 1x1 conv -> SiLU -> + text/time bias          = h1   level 1
//! h1 -> 2x2 avg pool -> 3x3 conv -> SiLU -> nearest upsample = h2   level 2
//! u = h1 + h2
//! a = u + self_attention(u)   (LoRA-adaptable q/k/v/out, refocus hook)
//! eps = 1x1 conv(a) (4,H,W)
//! ```
//!
//! The backward pass only produces gradients for the text conditioning and
//! the LoRA adapters; base weights are constants.

use super::lora::{LoraSet, LoraTarget};
use crate::diffusion::{AttentionHook, AttentionSite, DenoiserError, EpsilonModel};
use crate::refocus::attention_probs;
use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyUnetConfig {
    pub channels: usize,
    pub heads: usize,
    pub text_width: usize,
    pub time_width: usize,
    pub train_timesteps: usize,
    pub seed: u64,
}

impl Default for ToyUnetConfig {
    fn default() -> Self {
        Self { channels: 16, heads: 2, text_width: 16, time_width: 8, train_timesteps: 1000, seed: 0 }
    }
}

pub const INPUT_CHANNELS: usize = 9;
pub const LATENT_CHANNELS: usize = 4;

/// Frozen base weights.
#[derive(Clone, Debug)]
pub struct ToyUnet {
    cfg: ToyUnetConfig,
    w_in: Array2<f64>,
    b_in: Array1<f64>,
    w_text: Array2<f64>,
    w_time: Array2<f64>,
    w_mid: Array4<f64>,
    b_mid: Array1<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
    w_out: Array2<f64>,
    b_out: Array1<f64>,
}

/// Activations kept from the forward pass for [`ToyUnet::backward`].
pub struct ForwardCache {
    h: usize,
    w: usize,
    text_tokens: usize,
    pre2: Array3<f64>,
    u: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
    w_o: Array2<f64>,
}

/// Gradients with respect to the trainable inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct BackwardGrads {
    /// `(tokens, text_width)`
    pub text: Array2<f64>,
    /// Per adapter, in [`LoraSet`] order: `(d_down, d_up)`.
    pub adapters: Vec<(Array2<f64>, Array2<f64>)>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn map_to_tokens(map: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = map.dim();
    map.to_shape((c, h * w)).expect("contiguous reshape").t().as_standard_layout().into_owned()
}

fn tokens_to_map(tokens: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = tokens.ncols();
    tokens.t().as_standard_layout().into_owned().into_shape_with_order((c, h, w)).expect("token count matches grid")
}

/// Rows are `(channel, ky, kx)` taps, columns are output pixels; taps that
/// fall outside the map stay zero.
fn im2col3x3(input: &Array3<f64>) -> Array2<f64> {
    let (ci, h, w) = input.dim();
    let mut cols = Array2::zeros((ci * 9, h * w));
    for i in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = i * 9 + ky * 3 + kx;
                for y in 0..h {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = x as isize + kx as isize - 1;
                        if xx >= 0 && xx < w as isize {
                            cols[[row, y * w + x]] = input[[i, yy as usize, xx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`].
fn col2im3x3(cols: &Array2<f64>, ci: usize, h: usize, w: usize) -> Array3<f64> {
    let mut map = Array3::zeros((ci, h, w));
    for i in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = i * 9 + ky * 3 + kx;
                for y in 0..h {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = x as isize + kx as isize - 1;
                        if xx >= 0 && xx < w as isize {
                            map[[i, yy as usize, xx as usize]] += cols[[row, y * w + x]];
                        }
                    }
                }
            }
        }
    }
    map
}

fn kernel_matrix(weight: &Array4<f64>) -> Array2<f64> {
    let (co, ci, _, _) = weight.dim();
    weight.to_shape((co, ci * 9)).expect("kernel reshape").into_owned()
}

fn conv3x3(input: &Array3<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (_, h, w) = input.dim();
    let co = weight.dim().0;
    let out = kernel_matrix(weight).dot(&im2col3x3(input)) + bias.view().insert_axis(Axis(1));
    out.into_shape_with_order((co, h, w)).expect("conv output shape")
}

/// Adjoint of [`conv3x3`] with respect to its input.
fn conv3x3_input_grad(grad_out: &Array3<f64>, weight: &Array4<f64>) -> Array3<f64> {
    let (co, h, w) = grad_out.dim();
    let ci = weight.dim().1;
    let g = grad_out.to_shape((co, h * w)).expect("grad reshape");
    col2im3x3(&kernel_matrix(weight).t().dot(&g), ci, h, w)
}

fn avg_pool2(map: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = map.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, y, x)| {
        (map[[k, 2 * y, 2 * x]] + map[[k, 2 * y + 1, 2 * x]] + map[[k, 2 * y, 2 * x + 1]] + map[[k, 2 * y + 1, 2 * x + 1]]) / 4.0
    })
}

fn upsample2(map: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = map.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, y, x)| map[[k, y / 2, x / 2]])
}

/// Adjoint of [`upsample2`]: sum each 2x2 block.
fn block_sum2(map: &Array3<f64>) -> Array3<f64> {
    avg_pool2(map) * 4.0
}

impl ToyUnet {
    pub fn new(cfg: ToyUnetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let mut gauss = |shape: (usize, usize), std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_fn(shape, |_| n.sample(&mut rng))
        };
        let w_in = gauss((c, INPUT_CHANNELS), 1.0 / (INPUT_CHANNELS as f64).sqrt());
        let b_in = gauss((1, c), 0.1).row(0).to_owned();
        let w_text = gauss((c, cfg.text_width), 1.0 / (cfg.text_width as f64).sqrt());
        let w_time = gauss((c, cfg.time_width), 0.5 / (cfg.time_width as f64).sqrt());
        let w_mid = gauss((c, c * 9), 1.0 / ((c * 9) as f64).sqrt())
            .into_shape_with_order((c, c, 3, 3))
            .expect("mid kernel shape");
        let b_mid = gauss((1, c), 0.1).row(0).to_owned();
        let attn_std = 1.0 / (c as f64).sqrt();
        let w_q = gauss((c, c), attn_std);
        let w_k = gauss((c, c), attn_std);
        let w_v = gauss((c, c), attn_std);
        let w_o = gauss((c, c), attn_std);
        let w_out = gauss((LATENT_CHANNELS, c), attn_std);
        let b_out = Array1::zeros(LATENT_CHANNELS);
        Self { cfg, w_in, b_in, w_text, w_time, w_mid, b_mid, w_q, w_k, w_v, w_o, w_out, b_out }
    }

    pub fn config(&self) -> &ToyUnetConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    /// Names of the frozen base tensors.
    pub fn frozen_parameter_names() -> [&'static str; 12] {
        [
            "conv_in.weight", "conv_in.bias", "cond.text", "cond.time", "mid.weight", "mid.bias",
            "attn1.to_q", "attn1.to_k", "attn1.to_v", "attn1.to_out", "conv_out.weight", "conv_out.bias",
        ]
    }

    /// `(name, element count)` for each frozen tensor.
    pub fn frozen_parameter_sizes(&self) -> Vec<(&'static str, usize)> {
        let sizes = [
            self.w_in.len(), self.b_in.len(), self.w_text.len(), self.w_time.len(), self.w_mid.len(),
            self.b_mid.len(), self.w_q.len(), self.w_k.len(), self.w_v.len(), self.w_o.len(),
            self.w_out.len(), self.b_out.len(),
        ];
        Self::frozen_parameter_names().into_iter().zip(sizes).collect()
    }

    pub fn frozen_parameter_count(&self) -> usize {
        self.frozen_parameter_sizes().iter().map(|(_, n)| n).sum()
    }

    pub fn base_weight(&self, target: LoraTarget) -> &Array2<f64> {
        match target {
            LoraTarget::Query => &self.w_q,
            LoraTarget::Key => &self.w_k,
            LoraTarget::Value => &self.w_v,
            LoraTarget::Out => &self.w_o,
        }
    }

    fn time_embedding(&self, t: usize) -> Array1<f64> {
        let e = self.cfg.time_width;
        let tn = t as f64 / self.cfg.train_timesteps as f64;
        Array1::from_shape_fn(e, |i| {
            let freq = (1u64 << (i / 2)) as f64 * std::f64::consts::PI;
            if i % 2 == 0 {
                (freq * tn).sin()
            } else {
                (freq * tn).cos()
            }
        })
    }

    pub fn forward(
        &self,
        x: &Array3<f64>,
        t: usize,
        text: &Array2<f64>,
        lora: &LoraSet,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<(Array3<f64>, ForwardCache), DenoiserError> {
        let (cin, h, w) = x.dim();
        if cin != INPUT_CHANNELS {
            return Err(DenoiserError::BadInput(format!("expected {INPUT_CHANNELS} input channels, got {cin}")));
        }
        if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(DenoiserError::BadInput(format!("latent grid {h}x{w} must be even and at least 2x2")));
        }
        if text.nrows() == 0 || text.ncols() != self.cfg.text_width {
            return Err(DenoiserError::BadInput(format!(
                "text conditioning {:?}, expected (_, {})",
                text.dim(),
                self.cfg.text_width
            )));
        }
        let eff = |target| lora.effective(target, self.base_weight(target)).map_err(|e| DenoiserError::BadInput(e.to_string()));
        let (w_q, w_k, w_v, w_o) = (eff(LoraTarget::Query)?, eff(LoraTarget::Key)?, eff(LoraTarget::Value)?, eff(LoraTarget::Out)?);

        // level 1
        let x_tok = map_to_tokens(x);
        let pooled_text = text.mean_axis(Axis(0)).expect("non-empty text");
        let cond = self.w_text.dot(&pooled_text) + self.w_time.dot(&self.time_embedding(t));
        let mut h1 = x_tok.dot(&self.w_in.t()) + &self.b_in;
        h1.mapv_inplace(silu);
        h1 += &cond;

        // level 2
        let p = avg_pool2(&tokens_to_map(&h1, h, w));
        let pre2 = conv3x3(&p, &self.w_mid, &self.b_mid);
        let h2 = pre2.mapv(silu);
        let u = &h1 + &map_to_tokens(&upsample2(&h2));

        // self-attention
        let c = self.cfg.channels;
        let heads = self.cfg.heads;
        let dh = c / heads;
        let q = u.dot(&w_q.t());
        let k = u.dot(&w_k.t());
        let v = u.dot(&w_v.t());
        let head_scores: Vec<Array2<f64>> = (0..heads)
            .map(|hd| {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                q.slice(cols).dot(&k.slice(cols).t())
            })
            .collect();
        // one modulation per layer, built from head-averaged raw scores
        let bias = hook.and_then(|hk| {
            let mean = head_scores.iter().fold(Array2::zeros(head_scores[0].dim()), |acc, s| acc + s) / heads as f64;
            hk.modulation(&AttentionSite { layer: 0, grid_h: h, grid_w: w }, &mean)
        });
        if let Some(b) = &bias {
            if b.dim() != head_scores[0].dim() {
                return Err(DenoiserError::BadInput(format!("modulation {:?} for {} tokens", b.dim(), h * w)));
            }
        }
        let mut o = Array2::zeros((h * w, c));
        let mut probs = Vec::with_capacity(heads);
        for (hd, scores) in head_scores.iter().enumerate() {
            let a = attention_probs(scores, bias.as_ref(), dh);
            let cols = s![.., hd * dh..(hd + 1) * dh];
            o.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            probs.push(a);
        }
        let a_tok = &u + &o.dot(&w_o.t());
        let out_tok = a_tok.dot(&self.w_out.t()) + &self.b_out;
        let eps = tokens_to_map(&out_tok, h, w);
        let cache = ForwardCache { h, w, text_tokens: text.nrows(), pre2, u, q, k, v, probs, o, w_q, w_k, w_v, w_o };
        Ok((eps, cache))
    }

    /// Backpropagate `d loss / d eps` to the text conditioning and adapters.
    /// The modulation bias, when present, is treated as a constant.
    pub fn backward(&self, cache: &ForwardCache, grad_eps: &Array3<f64>, lora: &LoraSet) -> BackwardGrads {
        let (h, w) = (cache.h, cache.w);
        let c = self.cfg.channels;
        let heads = self.cfg.heads;
        let dh = c / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let g_out = map_to_tokens(grad_eps);
        let g_a = g_out.dot(&self.w_out);
        let mut g_u = g_a.clone();

        let g_wo = g_a.t().dot(&cache.o);
        let g_o = g_a.dot(&cache.w_o);
        let mut g_q = Array2::zeros(cache.q.dim());
        let mut g_k = Array2::zeros(cache.k.dim());
        let mut g_v = Array2::zeros(cache.v.dim());
        for (hd, a) in cache.probs.iter().enumerate() {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let g_oh = g_o.slice(cols);
            let g_attn = g_oh.dot(&cache.v.slice(cols).t());
            g_v.slice_mut(cols).assign(&a.t().dot(&g_oh));
            let row_dot = (&g_attn * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let g_scores = (a * &(&g_attn - &row_dot)) * inv_sqrt;
            g_q.slice_mut(cols).assign(&g_scores.dot(&cache.k.slice(cols)));
            g_k.slice_mut(cols).assign(&g_scores.t().dot(&cache.q.slice(cols)));
        }
        let g_wq = g_q.t().dot(&cache.u);
        let g_wk = g_k.t().dot(&cache.u);
        let g_wv = g_v.t().dot(&cache.u);
        g_u += &g_q.dot(&cache.w_q);
        g_u += &g_k.dot(&cache.w_k);
        g_u += &g_v.dot(&cache.w_v);

        let adapters = lora
            .adapters
            .iter()
            .map(|ad| {
                let g_w = match ad.target {
                    LoraTarget::Query => &g_wq,
                    LoraTarget::Key => &g_wk,
                    LoraTarget::Value => &g_wv,
                    LoraTarget::Out => &g_wo,
                };
                let g_up = g_w.dot(&ad.down.t()) * ad.scale;
                let g_down = ad.up.t().dot(g_w) * ad.scale;
                (g_down, g_up)
            })
            .collect();

        // u = h1 + upsample(silu(conv(avgpool(h1))))
        let g_h2 = block_sum2(&tokens_to_map(&g_u, h, w));
        let g_pre2 = &g_h2 * &cache.pre2.mapv(silu_grad);
        let g_p = conv3x3_input_grad(&g_pre2, &self.w_mid);
        let g_h1 = &g_u + &map_to_tokens(&(upsample2(&g_p) / 4.0));

        // h1 = silu(conv_in x) + w_text . mean(text) + time term
        let g_cond = g_h1.sum_axis(Axis(0));
        let g_pooled = self.w_text.t().dot(&g_cond) / cache.text_tokens as f64;
        let text = Array2::from_shape_fn((cache.text_tokens, g_pooled.len()), |(_, j)| g_pooled[j]);
        BackwardGrads { text, adapters }
    }
}

/// A base network together with the adapters to apply.
pub struct AdaptedUnet<'a> {
    pub base: &'a ToyUnet,
    pub lora: &'a LoraSet,
}

impl EpsilonModel for AdaptedUnet<'_> {
    fn predict(
        &self,
        unet_input: &Array3<f64>,
        t: usize,
        text: &Array2<f64>,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<Array3<f64>, DenoiserError> {
        self.base.forward(unet_input, t, text, self.lora, hook).map(|(eps, _)| eps)
    }
}

impl EpsilonModel for ToyUnet {
    fn predict(
        &self,
        unet_input: &Array3<f64>,
        t: usize,
        text: &Array2<f64>,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<Array3<f64>, DenoiserError> {
        self.forward(unet_input, t, text, &LoraSet::empty(), hook).map(|(eps, _)| eps)
    }
}
