//! Object-level removal dataset: move a segmented object onto background,
//! paste it into the original image, and caption the background. The
//! blended image and the pasted footprint map back to the untouched
//! original, forming one erasure training pair.

mod store;

pub use store::{read_manifest, write_dataset, Manifest, ManifestEntry, OlrdReader, SampleMeta, FORMAT_VERSION};

use crate::clients::VlmClient;
use crate::panoptic::{PanopticScene, SegmentKind};
use crate::raster::{Mask, RasterError, Rgb8Image};
use crate::tuning::{background_tags, BackgroundTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum OlrdError {
    #[error("no thing segment with an eligible area")]
    NoErasableObject,
    #[error("no valid placement after {tries} tries")]
    PlacementNotFound { tries: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no background tag to caption")]
    NoBackgroundTag,
    #[error("sample invariant violated: {0}")]
    InvariantViolation(String),
    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Placement and eligibility thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OlrdConfig {
    /// Smallest eligible object, as a fraction of the image.
    pub min_area: f64,
    pub max_area: f64,
    /// Fraction of the moved footprint that must land on stuff pixels.
    pub purity: f64,
    pub max_tries: usize,
    /// Moved footprint must overlap the original one strictly less than this.
    pub max_self_iou: f64,
}

impl Default for OlrdConfig {
    fn default() -> Self {
        Self { min_area: 0.01, max_area: 0.30, purity: 0.95, max_tries: 100, max_self_iou: 0.25 }
    }
}

/// The object picked for shifting.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedObject {
    pub segment_id: u32,
    pub category: String,
    pub mask: Mask,
    /// Object pixels, black elsewhere.
    pub pixels: Rgb8Image,
}

/// Uniform draw among thing segments whose area fraction lies in
/// `[min_area, max_area]`.
pub fn select_object(scene: &PanopticScene, cfg: &OlrdConfig, rng: &mut impl Rng) -> Result<SelectedObject, OlrdError> {
    let total = scene.pixel_count() as f64;
    let eligible: Vec<_> = scene
        .segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Thing)
        .filter(|s| {
            let frac = s.area() as f64 / total;
            frac >= cfg.min_area && frac <= cfg.max_area
        })
        .collect();
    if eligible.is_empty() {
        return Err(OlrdError::NoErasableObject);
    }
    let seg = eligible[rng.random_range(0..eligible.len())];
    let pixels = Rgb8Image::from_fn(scene.image.width(), scene.image.height(), |x, y| {
        if seg.mask.get(y as usize, x as usize) {
            *scene.image.get_pixel(x, y)
        } else {
            image::Rgb([0, 0, 0])
        }
    });
    Ok(SelectedObject { segment_id: seg.id, category: seg.category.clone(), mask: seg.mask.clone(), pixels })
}

/// Fraction of `footprint` lying on `stuff`.
pub fn stuff_purity(footprint: &Mask, stuff: &Mask) -> f64 {
    let area = footprint.area();
    if area == 0 {
        return 0.0;
    }
    footprint.intersection_area(stuff) as f64 / area as f64
}

/// Offset `(dx, dy)` passes when the moved footprint stays inside the image,
/// is at least `purity` stuff, and overlaps the original below
/// `max_self_iou`.
pub fn placement_ok(mask: &Mask, stuff: &Mask, dx: i64, dy: i64, cfg: &OlrdConfig) -> bool {
    let moved = mask.shifted(dx, dy);
    moved.area() == mask.area() && stuff_purity(&moved, stuff) >= cfg.purity && moved.iou(mask) < cfg.max_self_iou
}

/// Draw offsets uniformly from those that keep the bounding box inside the
/// image until one passes [`placement_ok`].
pub fn find_placement(
    scene: &PanopticScene,
    mask: &Mask,
    cfg: &OlrdConfig,
    rng: &mut impl Rng,
) -> Result<(i64, i64), OlrdError> {
    if mask.dims() != (scene.height(), scene.width()) {
        return Err(OlrdError::ShapeMismatch(format!("mask {:?} on a {}x{} scene", mask.dims(), scene.height(), scene.width())));
    }
    let (y0, x0, y1, x1) = mask.bbox().ok_or(OlrdError::NoErasableObject)?;
    let (h, w) = (scene.height() as i64, scene.width() as i64);
    let dx_range = -(x0 as i64)..=(w - 1 - x1 as i64);
    let dy_range = -(y0 as i64)..=(h - 1 - y1 as i64);
    let stuff = scene.stuff_mask();
    for _ in 0..cfg.max_tries {
        let dx = rng.random_range(dx_range.clone());
        let dy = rng.random_range(dy_range.clone());
        if placement_ok(mask, &stuff, dx, dy, cfg) {
            return Ok((dx, dy));
        }
    }
    Err(OlrdError::PlacementNotFound { tries: cfg.max_tries })
}

/// Translate an image, filling uncovered pixels with black.
pub fn shift_image(img: &Rgb8Image, dx: i64, dy: i64) -> Rgb8Image {
    let (w, h) = (img.width() as i64, img.height() as i64);
    Rgb8Image::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if sx >= 0 && sy >= 0 && sx < w && sy < h {
            *img.get_pixel(sx as u32, sy as u32)
        } else {
            image::Rgb([0, 0, 0])
        }
    })
}

/// Moved object pixels where `moved_mask` is set, the original elsewhere.
pub fn blend(original: &Rgb8Image, moved_object: &Rgb8Image, moved_mask: &Mask) -> Result<Rgb8Image, OlrdError> {
    let dims = (original.height() as usize, original.width() as usize);
    if (moved_object.height() as usize, moved_object.width() as usize) != dims || moved_mask.dims() != dims {
        return Err(OlrdError::ShapeMismatch(format!(
            "image {:?}, object {}x{}, mask {:?}",
            dims,
            moved_object.height(),
            moved_object.width(),
            moved_mask.dims()
        )));
    }
    Ok(Rgb8Image::from_fn(original.width(), original.height(), |x, y| {
        if moved_mask.get(y as usize, x as usize) {
            *moved_object.get_pixel(x, y)
        } else {
            *original.get_pixel(x, y)
        }
    }))
}

/// `"Describe the {t1} and {t2} in the image"`, or the one-tag form.
pub fn caption_request(tags: &[String]) -> Result<String, OlrdError> {
    match tags {
        [] => Err(OlrdError::NoBackgroundTag),
        [one] => Ok(format!("Describe the {one} in the image")),
        [a, b, ..] => Ok(format!("Describe the {a} and {b} in the image")),
    }
}

/// Caption text, or an empty caption flagged as missing when the VLM fails.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub request: String,
    pub text: String,
    pub missing: bool,
}

pub fn background_caption(image: &Rgb8Image, tags: &[String], vlm: &dyn VlmClient) -> Result<Caption, OlrdError> {
    let request = caption_request(tags)?;
    match vlm.describe(image, &request) {
        Ok(text) if !text.trim().is_empty() => Ok(Caption { request, text, missing: false }),
        Ok(_) => {
            log::warn!("captioner returned an empty caption");
            Ok(Caption { request, text: String::new(), missing: true })
        }
        Err(e) => {
            log::warn!("captioner unavailable: {e}");
            Ok(Caption { request, text: String::new(), missing: true })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub object_id: u32,
    pub category: String,
    pub offset: (i64, i64),
    pub seed: u64,
}

/// One training record.
#[derive(Clone, Debug, PartialEq)]
pub struct ErasureSample {
    pub original: Rgb8Image,
    pub blended: Rgb8Image,
    /// 1 on the moved object footprint, the region to erase.
    pub shifted_mask: Mask,
    pub background_tags: Vec<BackgroundTag>,
    pub caption: Caption,
    pub provenance: Provenance,
}

impl ErasureSample {
    pub fn tag_names(&self) -> Vec<String> {
        self.background_tags.iter().map(|t| t.name.clone()).collect()
    }

    /// Re-derive the pixel invariants from the original and the recorded
    /// offset.
    pub fn check(&self) -> Result<(), OlrdError> {
        let (w, h) = self.original.dimensions();
        if self.blended.dimensions() != (w, h) || self.shifted_mask.dims() != (h as usize, w as usize) {
            return Err(OlrdError::InvariantViolation("dimensions disagree".into()));
        }
        let (dx, dy) = self.provenance.offset;
        for y in 0..h {
            for x in 0..w {
                let b = self.blended.get_pixel(x, y);
                if self.shifted_mask.get(y as usize, x as usize) {
                    let (sx, sy) = (x as i64 - dx, y as i64 - dy);
                    if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                        return Err(OlrdError::InvariantViolation(format!("footprint pixel ({x},{y}) has no source")));
                    }
                    if b != self.original.get_pixel(sx as u32, sy as u32) {
                        return Err(OlrdError::InvariantViolation(format!("pasted pixel ({x},{y}) differs")));
                    }
                } else if b != self.original.get_pixel(x, y) {
                    return Err(OlrdError::InvariantViolation(format!("pixel ({x},{y}) outside the footprint changed")));
                }
            }
        }
        Ok(())
    }
}

/// Select, place, blend and caption one object of `scene`. `(scene, seed)`
/// fully determines the result.
pub fn build_sample(
    scene: &PanopticScene,
    source: &str,
    seed: u64,
    vlm: &dyn VlmClient,
    cfg: &OlrdConfig,
) -> Result<ErasureSample, OlrdError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object = select_object(scene, cfg, &mut rng)?;
    let (dx, dy) = find_placement(scene, &object.mask, cfg, &mut rng)?;
    let shifted_mask = object.mask.shifted(dx, dy);
    let blended = blend(&scene.image, &shift_image(&object.pixels, dx, dy), &shifted_mask)?;
    let tags = background_tags(&scene.segments, &shifted_mask);
    let names: Vec<String> = tags.iter().map(|t| t.name.clone()).collect();
    let caption = background_caption(&scene.image, &names, vlm)?;
    let sample = ErasureSample {
        original: scene.image.clone(),
        blended,
        shifted_mask,
        background_tags: tags,
        caption,
        provenance: Provenance {
            source: source.to_string(),
            object_id: object.segment_id,
            category: object.category,
            offset: (dx, dy),
            seed,
        },
    };
    sample.check()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::ClientError;
    use crate::panoptic::Segment;
    use image::Rgb;

    fn seg(id: u32, category: &str, kind: SegmentKind, mask: Mask) -> Segment {
        Segment { id, category: category.into(), kind, mask }
    }

    #[test]
    fn blend_two_by_two() {
        let i = Rgb8Image::from_fn(2, 2, |x, y| {
            let v = [[10u8, 20], [30, 40]][y as usize][x as usize];
            Rgb([v, v, v])
        });
        let o = Rgb8Image::from_fn(2, 2, |x, y| if (x, y) == (0, 0) { Rgb([7, 7, 7]) } else { Rgb([0, 0, 0]) });
        let m = Mask::from_fn(2, 2, |y, x| (y, x) == (0, 0));
        let out = blend(&i, &o, &m).unwrap();
        let got: Vec<u8> = out.pixels().map(|p| p[0]).collect();
        assert_eq!(got, vec![7, 20, 30, 40]);
        assert_eq!(blend(&i, &o, &Mask::zeros(2, 2)).unwrap(), i);
        assert_eq!(blend(&i, &o, &Mask::ones(2, 2)).unwrap(), o);
        assert!(matches!(blend(&i, &o, &Mask::zeros(3, 2)), Err(OlrdError::ShapeMismatch(_))));
    }

    #[test]
    fn captions() {
        assert_eq!(caption_request(&["sky".into()]).unwrap(), "Describe the sky in the image");
        let p = caption_request(&["grass".into(), "gravel".into()]).unwrap();
        assert_eq!(p, "Describe the grass and gravel in the image");
        assert!(matches!(caption_request(&[]), Err(OlrdError::NoBackgroundTag)));

        let img = Rgb8Image::new(2, 2);
        let echoed = background_caption(&img, &["grass".into(), "gravel".into()], &crate::toy::EchoVlm).unwrap();
        assert_eq!(echoed.text, echoed.request);
        assert!(!echoed.missing);

        struct Down;
        impl VlmClient for Down {
            fn describe(&self, _: &Rgb8Image, _: &str) -> Result<String, ClientError> {
                Err(ClientError::Unavailable("offline".into()))
            }
        }
        let c = background_caption(&img, &["sky".into()], &Down).unwrap();
        assert!(c.missing && c.text.is_empty());
    }

    #[test]
    fn pure_stuff_scene_has_nothing_to_erase() {
        let scene = PanopticScene {
            image: Rgb8Image::new(4, 4),
            segments: vec![
                seg(1, "sky", SegmentKind::Stuff, Mask::from_fn(4, 4, |y, _| y < 2)),
                seg(2, "grass", SegmentKind::Stuff, Mask::from_fn(4, 4, |y, _| y >= 2)),
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(select_object(&scene, &OlrdConfig::default(), &mut rng), Err(OlrdError::NoErasableObject)));
    }

    #[test]
    fn whole_image_object_cannot_move() {
        let scene = PanopticScene {
            image: Rgb8Image::new(4, 4),
            segments: vec![seg(1, "sheep", SegmentKind::Thing, Mask::ones(4, 4))],
        };
        let cfg = OlrdConfig { max_area: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            find_placement(&scene, &Mask::ones(4, 4), &cfg, &mut rng),
            Err(OlrdError::PlacementNotFound { tries: 100 })
        ));
    }

    #[test]
    fn zero_offset_is_never_accepted() {
        let mask = Mask::from_fn(8, 8, |y, x| (2..4).contains(&y) && (2..4).contains(&x));
        let cfg = OlrdConfig::default();
        assert!(!placement_ok(&mask, &Mask::ones(8, 8), 0, 0, &cfg));
        assert!(placement_ok(&mask, &Mask::ones(8, 8), 2, 0, &cfg));
    }
}
