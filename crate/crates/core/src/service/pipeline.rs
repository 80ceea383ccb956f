use super::{feather_composite, EraseConfig, EraseError, EraserClients, EraserModel, Stage};
use crate::diffusion::{
    denoise_loop, forward_noise, steps_from_strength, AttentionHook, ConditioningBundle, DdimSampler, DenoiserError,
    EpsilonModel, LatentState,
};
use crate::panoptic::Segment;
use crate::raster::{masked_out, Mask, Rgb8Image};
use crate::refocus::{build_label_map, default_negative_rule, downsample_label_map, RefocusHook};
use crate::tuning::{background_tags, build_simple_prompt, AdaptedUnet, PLACEHOLDER};
use image::imageops;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Longest accepted input side in pixels.
pub const MAX_INPUT_SIDE: u32 = 2048;

/// Classifier-free guidance around a conditional model. The hook is passed
/// to both the conditional and the unconditional pass.
struct Guided<'a> {
    model: &'a dyn EpsilonModel,
    uncond: &'a Array2<f64>,
    scale: f64,
}

impl EpsilonModel for Guided<'_> {
    fn predict(
        &self,
        input: &Array3<f64>,
        t: usize,
        text: &Array2<f64>,
        hook: Option<&dyn AttentionHook>,
    ) -> Result<Array3<f64>, DenoiserError> {
        let cond = self.model.predict(input, t, text, hook)?;
        if self.scale == 1.0 {
            return Ok(cond);
        }
        let uncond = self.model.predict(input, t, self.uncond, hook)?;
        Ok(&uncond + &((&cond - &uncond) * self.scale))
    }
}

/// Edge-replicate `img` to `h x w`.
fn pad_edge(img: &Rgb8Image, w: u32, h: u32) -> Rgb8Image {
    Rgb8Image::from_fn(w, h, |x, y| *img.get_pixel(x.min(img.width() - 1), y.min(img.height() - 1)))
}

fn round_up(v: u32, m: u32) -> u32 {
    v.div_ceil(m) * m
}

/// Model, clients and limits for running erasures.
pub struct Eraser {
    pub model: EraserModel,
    pub clients: EraserClients,
    pub max_side: u32,
}

impl Eraser {
    pub fn new(model: EraserModel, clients: EraserClients) -> Self {
        Self { model, clients, max_side: MAX_INPUT_SIDE }
    }

    /// Checks that need no client call.
    pub fn check_inputs(&self, image: &Rgb8Image, mask: &Mask, cfg: &EraseConfig) -> Result<(), EraseError> {
        let (w, h) = image.dimensions();
        if mask.dims() != (h as usize, w as usize) {
            return Err(EraseError::ShapeMismatch { mask: mask.dims(), image: (h as usize, w as usize) });
        }
        if mask.is_empty() {
            return Err(EraseError::EmptyMask);
        }
        if w.max(h) > self.max_side {
            return Err(EraseError::OversizeInput { width: w, height: h, limit: self.max_side });
        }
        cfg.validate()
    }

    pub fn erase(&self, image: &Rgb8Image, mask: &Mask, cfg: &EraseConfig) -> Result<Rgb8Image, EraseError> {
        self.erase_with_progress(image, mask, cfg, &mut |_| {})
    }

    /// As [`Eraser::erase`], reporting each stage as it begins.
    pub fn erase_with_progress(
        &self,
        image: &Rgb8Image,
        mask: &Mask,
        cfg: &EraseConfig,
        on_stage: &mut dyn FnMut(Stage),
    ) -> Result<Rgb8Image, EraseError> {
        self.check_inputs(image, mask, cfg)?;
        let vae = self.clients.vae.as_ref();
        let factor = vae.downscale();
        // the denoiser halves the latent grid once, so the latent must be even
        let multiple = (factor * 2) as u32;
        let (w, h) = image.dimensions();
        let (pw, ph) = (round_up(w, multiple), round_up(h, multiple));
        let padded = pad_edge(image, pw, ph);
        let padded_mask = mask.padded_to(ph as usize, pw as usize);

        on_stage(Stage::Segment);
        let segments: Vec<Segment> = self.clients.segmenter.panoptic(&padded).map_err(|e| EraseError::at(Stage::Segment, e))?;
        let rule = default_negative_rule(&segments, &padded_mask);
        let (labels, _gaps) =
            build_label_map(&segments, &padded_mask, &rule).map_err(|e| EraseError::at(Stage::Segment, e))?;
        let (lh, lw) = (ph as usize / factor, pw as usize / factor);
        let latent_labels = downsample_label_map(&labels, lh, lw).map_err(|e| EraseError::at(Stage::Segment, e))?;
        let tags = background_tags(&segments, &padded_mask);
        let prompt = build_simple_prompt(&tags).unwrap_or_else(|_| format!("A photo of {PLACEHOLDER}"));

        on_stage(Stage::Init);
        let prefilled = crate::diffusion::prefill(&padded, &padded_mask, self.clients.inpainter.as_ref())
            .map_err(|e| EraseError::at(Stage::Init, e))?;

        on_stage(Stage::Encode);
        let z0 = LatentState::clean(vae.encode(&prefilled).map_err(|e| EraseError::at(Stage::Encode, e))?);
        let z_masked =
            vae.encode(&masked_out(&padded, &padded_mask)).map_err(|e| EraseError::at(Stage::Encode, e))?;
        let table = self.model.token.install(self.model.encoder.table());
        let text = self.model.encoder.encode_with(&prompt, &table);
        let uncond = self.model.encoder.encode_with(&cfg.negative_prompt, &table);
        let cond = ConditioningBundle::new(z_masked, &padded_mask.max_pool(factor), text);

        on_stage(Stage::Denoise);
        let sampler = DdimSampler::new(self.model.schedule.clone(), cfg.inference_steps).with_x0_clip(vae.latent_range());
        let run = steps_from_strength(sampler.inference_steps(), cfg.strength).map_err(|e| EraseError::at(Stage::Denoise, e))?;
        let t_start = sampler.start_timestep(run);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let eps = z0.z.mapv(|_| StandardNormal.sample(&mut rng));
        let z_t = forward_noise(&z0, t_start, &self.model.schedule, &eps).map_err(|e| EraseError::at(Stage::Denoise, e))?;
        let hook = RefocusHook::new(latent_labels, cfg.refocus);
        let adapted = AdaptedUnet { base: &self.model.unet, lora: &self.model.lora };
        let guided = Guided { model: &adapted, uncond: &uncond, scale: cfg.guidance_scale };
        let z_final = denoise_loop(&z_t, &cond, &sampler, &guided, Some(&hook)).map_err(|e| EraseError::at(Stage::Denoise, e))?;

        on_stage(Stage::Decode);
        let decoded = vae.decode(&z_final.z).map_err(|e| EraseError::at(Stage::Decode, e))?;
        if decoded.dimensions() != (pw, ph) {
            return Err(EraseError::at(Stage::Decode, format!("decoded {:?}, expected {:?}", decoded.dimensions(), (pw, ph))));
        }
        let generated = imageops::crop_imm(&decoded, 0, 0, w, h).to_image();

        on_stage(Stage::Composite);
        feather_composite(image, &generated, mask).ok_or_else(|| EraseError::at(Stage::Composite, "dimension mismatch"))
    }
}
