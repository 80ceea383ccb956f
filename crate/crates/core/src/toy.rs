//! Deterministic desk-scale stand-ins for the external models, plus a
//! synthetic scene generator used by tests, demos and the CLI.

use crate::clients::{
    ClientError, CoarseInpainterClient, FeatureExtractorClient, SegmenterClient, VaeClient, VlmClient,
};
use crate::panoptic::{PanopticScene, Segment, SegmentKind};
use crate::raster::{luma, masked_out, Mask, Rgb8Image};
use crate::tuning::{background_tags, build_simple_prompt, TrainSample, PLACEHOLDER};
use image::Rgb;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// 8x8 average-pooling "autoencoder". Channels 0-2 hold mean RGB mapped to
/// [-1, 1]; channel 3 holds mean luma. Decoding is nearest-neighbour.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyVae;

impl VaeClient for ToyVae {
    fn encode(&self, image: &Rgb8Image) -> Result<Array3<f64>, ClientError> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w % 8 != 0 || h % 8 != 0 || w == 0 || h == 0 {
            return Err(ClientError::Failed(format!("{w}x{h} is not a positive multiple of 8")));
        }
        let (lh, lw) = (h / 8, w / 8);
        let mut z = Array3::zeros((4, lh, lw));
        for (x, y, p) in image.enumerate_pixels() {
            let (ly, lx) = (y as usize / 8, x as usize / 8);
            for c in 0..3 {
                z[[c, ly, lx]] += p[c] as f64;
            }
            z[[3, ly, lx]] += 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
        }
        z.mapv_inplace(|v| v / 64.0 / 127.5 - 1.0);
        Ok(z)
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Rgb8Image, ClientError> {
        let (c, lh, lw) = latent.dim();
        if c < 3 {
            return Err(ClientError::Failed(format!("latent has {c} channels")));
        }
        let to_u8 = |v: f64| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        Ok(Rgb8Image::from_fn((lw * 8) as u32, (lh * 8) as u32, |x, y| {
            let (ly, lx) = (y as usize / 8, x as usize / 8);
            Rgb([to_u8(latent[[0, ly, lx]]), to_u8(latent[[1, ly, lx]]), to_u8(latent[[2, ly, lx]])])
        }))
    }

    fn latent_range(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// Fills the erase region with the per-channel mean of the kept pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanFillInpainter;

impl CoarseInpainterClient for MeanFillInpainter {
    fn inpaint(&self, image: &Rgb8Image, mask: &Mask) -> Result<Rgb8Image, ClientError> {
        let mut sums = [0f64; 3];
        let mut n = 0usize;
        for (x, y, p) in image.enumerate_pixels() {
            if !mask.get(y as usize, x as usize) {
                for c in 0..3 {
                    sums[c] += p[c] as f64;
                }
                n += 1;
            }
        }
        let fill = if n == 0 {
            Rgb([0, 0, 0])
        } else {
            Rgb(sums.map(|s| (s / n as f64).round() as u8))
        };
        let mut out = image.clone();
        for (x, y, p) in out.enumerate_pixels_mut() {
            if mask.get(y as usize, x as usize) {
                *p = fill;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaletteEntry {
    pub category: String,
    pub kind: SegmentKind,
    pub color: [u8; 3],
}

/// Nearest-colour segmenter over a fixed palette. Stuff pixels merge into
/// one segment per category; thing pixels split into 4-connected instances.
#[derive(Clone, Debug)]
pub struct PaletteSegmenter {
    pub palette: Vec<PaletteEntry>,
}

impl Default for PaletteSegmenter {
    fn default() -> Self {
        Self { palette: default_palette() }
    }
}

pub fn default_palette() -> Vec<PaletteEntry> {
    let e = |category: &str, kind, color| PaletteEntry { category: category.into(), kind, color };
    vec![
        e("sky", SegmentKind::Stuff, [120, 180, 235]),
        e("grass", SegmentKind::Stuff, [60, 150, 50]),
        e("gravel", SegmentKind::Stuff, [150, 140, 125]),
        e("sheep", SegmentKind::Thing, [240, 240, 230]),
        e("person", SegmentKind::Thing, [200, 40, 60]),
        e("dog", SegmentKind::Thing, [110, 70, 30]),
    ]
}

impl PaletteSegmenter {
    fn classify(&self, p: &Rgb<u8>) -> usize {
        let dist = |c: &[u8; 3]| (0..3).map(|i| (p[i] as i32 - c[i] as i32).pow(2)).sum::<i32>();
        (0..self.palette.len()).min_by_key(|&i| dist(&self.palette[i].color)).expect("non-empty palette")
    }

    pub fn segment(&self, image: &Rgb8Image) -> Vec<Segment> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let class: Vec<usize> = image.pixels().map(|p| self.classify(p)).collect();
        let mut segments = Vec::new();
        let mut next_id = 1u32;
        for (ci, entry) in self.palette.iter().enumerate() {
            match entry.kind {
                SegmentKind::Stuff => {
                    let m = Mask::from_fn(h, w, |y, x| class[y * w + x] == ci);
                    if !m.is_empty() {
                        segments.push(Segment { id: next_id, category: entry.category.clone(), kind: entry.kind, mask: m });
                        next_id += 1;
                    }
                }
                SegmentKind::Thing => {
                    let mut seen = vec![false; w * h];
                    for start in 0..w * h {
                        if class[start] != ci || seen[start] {
                            continue;
                        }
                        let mut m = Mask::zeros(h, w);
                        let mut queue = VecDeque::from([start]);
                        seen[start] = true;
                        while let Some(i) = queue.pop_front() {
                            let (y, x) = (i / w, i % w);
                            m.set(y, x, true);
                            let mut push = |j: usize| {
                                if class[j] == ci && !seen[j] {
                                    seen[j] = true;
                                    queue.push_back(j);
                                }
                            };
                            if y > 0 {
                                push(i - w);
                            }
                            if y + 1 < h {
                                push(i + w);
                            }
                            if x > 0 {
                                push(i - 1);
                            }
                            if x + 1 < w {
                                push(i + 1);
                            }
                        }
                        segments.push(Segment { id: next_id, category: entry.category.clone(), kind: entry.kind, mask: m });
                        next_id += 1;
                    }
                }
            }
        }
        segments
    }
}

impl SegmenterClient for PaletteSegmenter {
    fn panoptic(&self, image: &Rgb8Image) -> Result<Vec<Segment>, ClientError> {
        Ok(self.segment(image))
    }
}

/// Returns its prompt verbatim.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoVlm;

impl VlmClient for EchoVlm {
    fn describe(&self, _image: &Rgb8Image, prompt: &str) -> Result<String, ClientError> {
        Ok(prompt.to_string())
    }
}

/// Hand-crafted features: per-channel mean/std plus a 4x4 grid of mean luma,
/// all scaled to [0, 1]. The perceptual distance is the mean absolute pixel
/// difference over 255.
#[derive(Clone, Copy, Debug, Default)]
pub struct PixelStatsExtractor;

impl PixelStatsExtractor {
    fn features(img: &Rgb8Image) -> Vec<f64> {
        let n = (img.width() * img.height()) as f64;
        let mut f = Vec::with_capacity(22);
        for c in 0..3 {
            let mean = img.pixels().map(|p| p[c] as f64).sum::<f64>() / n;
            let var = img.pixels().map(|p| (p[c] as f64 - mean).powi(2)).sum::<f64>() / n;
            f.push(mean / 255.0);
            f.push(var.sqrt() / 255.0);
        }
        let y = luma(img);
        let (w, h) = (img.width() as usize, img.height() as usize);
        for gy in 0..4 {
            for gx in 0..4 {
                let (y0, y1) = (gy * h / 4, ((gy + 1) * h / 4).max(gy * h / 4 + 1).min(h));
                let (x0, x1) = (gx * w / 4, ((gx + 1) * w / 4).max(gx * w / 4 + 1).min(w));
                let mut s = 0.0;
                let mut k = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        s += y[yy * w + xx];
                        k += 1.0;
                    }
                }
                f.push(if k > 0.0 { s / k / 255.0 } else { 0.0 });
            }
        }
        f
    }
}

impl FeatureExtractorClient for PixelStatsExtractor {
    fn embed(&self, images: &[Rgb8Image]) -> Result<Vec<Vec<f64>>, ClientError> {
        Ok(images.iter().map(Self::features).collect())
    }

    fn perceptual_distance(&self, a: &Rgb8Image, b: &Rgb8Image) -> Result<f64, ClientError> {
        if a.dimensions() != b.dimensions() {
            return Err(ClientError::Failed("dimension mismatch".into()));
        }
        let total: u64 = a
            .as_raw()
            .iter()
            .zip(b.as_raw())
            .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs() as u64)
            .sum();
        Ok(total as f64 / a.as_raw().len() as f64 / 255.0)
    }

    fn identifier(&self) -> String {
        "pixel-stats-v1".into()
    }
}

/// Synthetic landscape: sky above a horizon, grass and a gravel patch below,
/// and one to three object blobs (sheep/person/dog) standing on the grass.
/// Colours get small per-pixel jitter; the default palette still segments
/// them exactly.
pub fn toy_scene(seed: u64, height: u32, width: u32) -> Rgb8Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = default_palette();
    let color = |name: &str| palette.iter().find(|e| e.category == name).expect("palette entry").color;
    let (h, w) = (height as i64, width as i64);
    let horizon = h * rng.random_range(25..40) / 100;
    let gravel_x0 = w * rng.random_range(50..70) / 100;
    let gravel_y0 = h * rng.random_range(65..80) / 100;
    let mut img = Rgb8Image::from_fn(width, height, |x, y| {
        let (x, y) = (x as i64, y as i64);
        if y < horizon {
            Rgb(color("sky"))
        } else if x >= gravel_x0 && y >= gravel_y0 {
            Rgb(color("gravel"))
        } else {
            Rgb(color("grass"))
        }
    });
    let n_objects = rng.random_range(1..=3);
    let kinds = ["sheep", "person", "dog"];
    let mut occupied = Mask::zeros(height as usize, width as usize);
    for _ in 0..n_objects {
        let kind = kinds[rng.random_range(0..kinds.len())];
        // blob radius a few percent of the short side; areas land in ~1-8 %
        let r = (h.min(w) as f64 * rng.random_range(0.07..0.13)).max(2.0);
        let ri = r.ceil() as i64;
        let cy = rng.random_range((horizon + ri).min(h - ri - 1)..(h - ri).max(horizon + ri + 1));
        let cx = rng.random_range(ri..(w - ri).max(ri + 1));
        let blob = Mask::from_fn(height as usize, width as usize, |y, x| {
            let dy = (y as i64 - cy) as f64 / (r * 1.2);
            let dx = (x as i64 - cx) as f64 / r;
            dy * dy + dx * dx <= 1.0
        });
        // keep instances separated so connected components stay distinct
        let halo = Mask::from_fn(height as usize, width as usize, |y, x| {
            let dy = (y as i64 - cy) as f64 / (r * 1.2 + 2.0);
            let dx = (x as i64 - cx) as f64 / (r + 2.0);
            dy * dy + dx * dx <= 1.0
        });
        if halo.intersection_area(&occupied) > 0 {
            continue;
        }
        occupied = occupied.union(&halo);
        for y in 0..height as usize {
            for x in 0..width as usize {
                if blob.get(y, x) {
                    img.put_pixel(x as u32, y as u32, Rgb(color(kind)));
                }
            }
        }
    }
    for p in img.pixels_mut() {
        for c in 0..3 {
            let j: i16 = rng.random_range(-6..=6);
            p[c] = (p[c] as i16 + j).clamp(0, 255) as u8;
        }
    }
    img
}

/// Toy scene together with its palette segmentation.
pub fn toy_panoptic_scene(seed: u64, height: u32, width: u32) -> PanopticScene {
    let image = toy_scene(seed, height, width);
    let segments = PaletteSegmenter::default().segment(&image);
    PanopticScene { image, segments }
}

/// Latent-space training record built from [`toy_scene`]: the erase region
/// is a box over the lower middle of the frame, prompts come from the
/// palette segmentation.
pub fn toy_train_sample(seed: u64, size: u32) -> TrainSample {
    let scene = toy_panoptic_scene(seed, size, size);
    let s = size as usize;
    let mask = Mask::from_fn(s, s, |y, x| (s * 5 / 16..s * 11 / 16).contains(&y) && (s / 4..s * 5 / 8).contains(&x));
    let tags = background_tags(&scene.segments, &mask);
    let simple_prompt = build_simple_prompt(&tags).unwrap_or_else(|_| format!("A photo of {PLACEHOLDER}"));
    let caption_prompt = match tags.as_slice() {
        [a, b, ..] => format!("the {} and the {} in the scene", a.name, b.name),
        [a] => format!("the {} in the scene", a.name),
        [] => "a scene".to_string(),
    };
    TrainSample {
        original_latent: ToyVae.encode(&scene.image).expect("toy size is a multiple of 8"),
        masked_latent: ToyVae.encode(&masked_out(&scene.image, &mask)).expect("toy size is a multiple of 8"),
        mask: mask.max_pool(8),
        simple_prompt,
        caption_prompt,
    }
}
