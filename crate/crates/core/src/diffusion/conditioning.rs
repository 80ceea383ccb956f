use super::{check_shape, DiffusionError, LatentState};
use crate::clients::{CoarseInpainterClient, VaeClient};
use crate::raster::{Mask, Rgb8Image};
use ndarray::{concatenate, Array2, Array3, Axis};

/// Everything the inpainting denoiser is conditioned on besides the noisy
/// latent itself.
#[derive(Clone, Debug)]
pub struct ConditioningBundle {
    /// Latent of the image with the erase region blanked, `(4, h, w)`.
    pub z_masked: Array3<f64>,
    /// Latent-resolution erase mask, `(1, h, w)`, values in {0, 1}.
    pub mask: Array3<f64>,
    /// Per-token text conditioning, `(tokens, width)`.
    pub text_embedding: Array2<f64>,
}

impl ConditioningBundle {
    pub fn new(z_masked: Array3<f64>, mask: &Mask, text_embedding: Array2<f64>) -> Self {
        let (h, w) = mask.dims();
        let mask = Array3::from_shape_fn((1, h, w), |(_, y, x)| mask.get(y, x) as u8 as f64);
        Self { z_masked, mask, text_embedding }
    }
}

/// Channel order `[z_t (4) | z_masked (4) | mask (1)]`.
pub fn assemble_unet_input(
    z: &LatentState,
    cond: &ConditioningBundle,
) -> Result<Array3<f64>, DiffusionError> {
    let (_, h, w) = z.z.dim();
    let (_, mh, mw) = cond.mask.dim();
    let (_, zh, zw) = cond.z_masked.dim();
    check_shape(&[h, w], &[zh, zw])?;
    check_shape(&[h, w], &[mh, mw])?;
    Ok(concatenate(Axis(0), &[z.z.view(), cond.z_masked.view(), cond.mask.view()])
        .expect("spatial dims checked"))
}

/// Run the coarse inpainter over the erase region. Pixels outside the mask
/// are copied from `image` so only the erase region can change.
pub fn prefill(
    image: &Rgb8Image,
    mask: &Mask,
    inpainter: &dyn CoarseInpainterClient,
) -> Result<Rgb8Image, DiffusionError> {
    let dims = [image.height() as usize, image.width() as usize];
    check_shape(&dims, &[mask.height(), mask.width()])?;
    if mask.is_empty() {
        return Ok(image.clone());
    }
    let filled = inpainter.inpaint(image, mask).map_err(DiffusionError::InpainterUnavailable)?;
    check_shape(&dims, &[filled.height() as usize, filled.width() as usize])?;
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            *p = *filled.get_pixel(x, y);
        }
    }
    Ok(out)
}

/// Encode the pre-filled image: the clean latent the denoising chain starts
/// from before re-noising.
pub fn content_initialize(
    image: &Rgb8Image,
    mask: &Mask,
    inpainter: &dyn CoarseInpainterClient,
    vae: &dyn VaeClient,
) -> Result<LatentState, DiffusionError> {
    let pre = prefill(image, mask, inpainter)?;
    let z = vae.encode(&pre).map_err(DiffusionError::EncodeFailure)?;
    Ok(LatentState::clean(z))
}
