use super::EvalError;
use crate::clients::FeatureExtractorClient;
use crate::raster::{luma, Rgb8Image};
use image::imageops::{self, FilterType};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub const EVAL_SIZE: u32 = 512;
pub const PSNR_CAP_DB: f64 = 100.0;

/// Scale the long side to 512 with bilinear filtering, then zero-pad the
/// short side. Odd padding puts the extra line at the bottom/right.
pub fn resize_pad_512(img: &Rgb8Image) -> Result<Rgb8Image, EvalError> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(EvalError::DegenerateImage);
    }
    if (w, h) == (EVAL_SIZE, EVAL_SIZE) {
        return Ok(img.clone());
    }
    // integer floor keeps a non-square input strictly short of 512 on its
    // short side, so at least one pad line always remains
    let long = w.max(h) as u64;
    let nw = ((w as u64 * EVAL_SIZE as u64 / long) as u32).max(1);
    let nh = ((h as u64 * EVAL_SIZE as u64 / long) as u32).max(1);
    let content = imageops::resize(img, nw, nh, FilterType::Triangle);
    let mut out = Rgb8Image::new(EVAL_SIZE, EVAL_SIZE);
    let left = (EVAL_SIZE - nw) / 2;
    let top = (EVAL_SIZE - nh) / 2;
    imageops::replace(&mut out, &content, left as i64, top as i64);
    Ok(out)
}

fn same_dims(a: &Rgb8Image, b: &Rgb8Image) -> Result<(), EvalError> {
    if a.dimensions() != b.dimensions() {
        return Err(EvalError::ShapeMismatch(format!("{:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    Ok(())
}

/// Peak 255 over all channels; zero error reports [`PSNR_CAP_DB`].
pub fn psnr(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64, EvalError> {
    same_dims(a, b)?;
    let n = a.as_raw().len() as f64;
    let sse: f64 = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64.powi(2) / (sse / n)).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter keeping only windows fully inside the image.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM on luma with an 11x11 Gaussian window (sigma 1.5).
/// Images smaller than the window are scored as a single window over the
/// whole image.
pub fn ssim(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64, EvalError> {
    same_dims(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w == 0 || h == 0 {
        return Err(EvalError::DegenerateImage);
    }
    let (x, y) = (luma(a), luma(b));
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let kernel = if w >= SSIM_WINDOW && h >= SSIM_WINDOW {
        gaussian_kernel()
    } else {
        // a single uniform window spanning the smaller side is not
        // separable over a rectangle, so fall back to global statistics
        let n = (w * h) as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cov = x.iter().zip(&y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
        return Ok(((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
    };
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<f64>>();
    let (mu_x, ow, oh) = filter_valid(&x, w, h, &kernel);
    let (mu_y, _, _) = filter_valid(&y, w, h, &kernel);
    let (exx, _, _) = filter_valid(&prod(&x, &x), w, h, &kernel);
    let (eyy, _, _) = filter_valid(&prod(&y, &y), w, h, &kernel);
    let (exy, _, _) = filter_valid(&prod(&x, &y), w, h, &kernel);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = exx[i] - mx * mx;
        let vy = eyy[i] - my * my;
        let cov = exy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / (ow * oh) as f64)
}

/// Perceptual distance from the external client.
pub fn lpips(a: &Rgb8Image, b: &Rgb8Image, fx: &dyn FeatureExtractorClient) -> Result<f64, EvalError> {
    same_dims(a, b)?;
    let d = fx.perceptual_distance(a, b).map_err(EvalError::ExtractorUnavailable)?;
    if !d.is_finite() || d < 0.0 {
        return Err(EvalError::ExtractorInvalid(format!("distance {d}")));
    }
    Ok(d)
}

/// Self-distance must vanish and the distance must be symmetric on a probe
/// pair.
pub fn validate_extractor(fx: &dyn FeatureExtractorClient, a: &Rgb8Image, b: &Rgb8Image) -> Result<(), EvalError> {
    let self_d = lpips(a, a, fx)?;
    if self_d.abs() > 1e-6 {
        return Err(EvalError::ExtractorInvalid(format!("self-distance {self_d}")));
    }
    let (ab, ba) = (lpips(a, b, fx)?, lpips(b, a, fx)?);
    if (ab - ba).abs() > 1e-6 {
        return Err(EvalError::ExtractorInvalid(format!("asymmetric distance {ab} vs {ba}")));
    }
    Ok(())
}

fn gaussian_fit(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let n = features.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(EvalError::ShapeMismatch("feature vectors differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    // eigenvalues under the clamp threshold are rounding noise of a
    // singular covariance and count as zero
    let roots = eig.eigenvalues.map(|v| if v < 1e-10 { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets. The
/// cross term uses `Tr sqrt(S_a^1/2 S_b S_a^1/2)`, which equals
/// `Tr sqrt(S_a S_b)` and stays symmetric.
pub fn fid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64, EvalError> {
    let (mu_a, cov_a) = gaussian_fit(set_a)?;
    let (mu_b, cov_b) = gaussian_fit(set_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(EvalError::ShapeMismatch(format!("feature width {} vs {}", mu_a.len(), mu_b.len())));
    }
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&v| if v < 1e-10 { 0.0 } else { v.sqrt() }).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn psnr_examples() {
        let a = Rgb8Image::from_pixel(8, 8, Rgb([100, 100, 100]));
        let b = Rgb8Image::from_pixel(8, 8, Rgb([116, 116, 116]));
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 24.05).abs() < 0.01);
        let black = Rgb8Image::new(4, 4);
        let white = Rgb8Image::from_pixel(4, 4, Rgb([255, 255, 255]));
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
        assert!(matches!(psnr(&black, &a), Err(EvalError::ShapeMismatch(_))));
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        let k = gaussian_kernel();
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(k[5] > k[4] && (k[4] - k[6]).abs() < 1e-15);
    }

    #[test]
    fn degenerate_image() {
        assert!(matches!(resize_pad_512(&Rgb8Image::new(0, 5)), Err(EvalError::DegenerateImage)));
    }
}
