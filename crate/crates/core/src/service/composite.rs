use crate::raster::{distance_to_mask, Mask, Rgb8Image};

/// Width of the blend band around the erase mask.
pub const FEATHER_PX: usize = 4;

/// Per-pixel weight of the generated image: 1 on the mask, falling linearly
/// over the band (`1 - d / (FEATHER_PX + 1)` at distance `d`), 0 beyond it.
pub fn feather_weights(mask: &Mask) -> Vec<f64> {
    distance_to_mask(mask, FEATHER_PX)
        .into_iter()
        .map(|d| if d.is_finite() { 1.0 - d / (FEATHER_PX as f64 + 1.0) } else { 0.0 })
        .collect()
}

/// Blend `generated` into `input`. Pixels more than [`FEATHER_PX`] from the
/// mask are copied from `input` untouched.
pub fn feather_composite(input: &Rgb8Image, generated: &Rgb8Image, mask: &Mask) -> Option<Rgb8Image> {
    let (w, h) = input.dimensions();
    if generated.dimensions() != (w, h) || mask.dims() != (h as usize, w as usize) {
        return None;
    }
    let weights = feather_weights(mask);
    let mut out = input.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let a = weights[y as usize * w as usize + x as usize];
        if a == 0.0 {
            continue;
        }
        let g = generated.get_pixel(x, y);
        for c in 0..3 {
            p[c] = (a * g[c] as f64 + (1.0 - a) * p[c] as f64).round().clamp(0.0, 255.0) as u8;
        }
    }
    Some(out)
}
