use super::{downsample_label_map, window_active, AttentionModulation, LabelMap, RefocusConfig};
use crate::diffusion::{AttentionHook, AttentionSite};
use ndarray::Array2;
use std::collections::HashMap;
use std::sync::Mutex;

/// Attention hook that recomputes the modulation from fresh scores at every
/// step and layer. One label map (at latent resolution) serves all layers;
/// coarser layers get a priority-pooled copy.
pub struct RefocusHook {
    labels: LabelMap,
    cfg: RefocusConfig,
    pooled: Mutex<HashMap<(usize, usize), LabelMap>>,
}

impl RefocusHook {
    pub fn new(labels: LabelMap, cfg: RefocusConfig) -> Self {
        Self { labels, cfg, pooled: Mutex::new(HashMap::new()) }
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    fn labels_at(&self, h: usize, w: usize) -> Option<LabelMap> {
        if (h, w) == (self.labels.height(), self.labels.width()) {
            return Some(self.labels.clone());
        }
        let mut cache = self.pooled.lock().expect("label cache poisoned");
        if let Some(lm) = cache.get(&(h, w)) {
            return Some(lm.clone());
        }
        let lm = downsample_label_map(&self.labels, h, w).ok()?;
        cache.insert((h, w), lm.clone());
        Some(lm)
    }
}

impl AttentionHook for RefocusHook {
    fn active(&self, t_normalized: f64) -> bool {
        self.cfg.enabled && window_active(t_normalized, &self.cfg)
    }

    fn modulation(&self, site: &AttentionSite, scores: &Array2<f64>) -> Option<Array2<f64>> {
        let lm = match self.labels_at(site.grid_h, site.grid_w) {
            Some(lm) => lm,
            None => {
                log::warn!("refocus: no label map for {}x{} layer {}", site.grid_h, site.grid_w, site.layer);
                return None;
            }
        };
        AttentionModulation::new(&lm, scores, &self.cfg).ok().map(|m| m.m)
    }
}
