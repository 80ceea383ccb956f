//! Pixel-space containers shared by every module: 8-bit RGB images and
//! binary masks.
//!
//! Mask polarity is fixed crate-wide: `1` marks pixels to erase/regenerate.

use image::{GrayImage, ImageFormat, Luma};
use std::io::Cursor;
use thiserror::Error;

pub type Rgb8Image = image::RgbImage;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("mask values must be 0 or 1, found {0}")]
    NonBinary(u8),
    #[error("mask data length {len} does not match {height}x{width}")]
    BadLength { len: usize, height: usize, width: usize },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

/// Binary per-pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != height * width {
            return Err(RasterError::BadLength { len: data.len(), height, width });
        }
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(RasterError::NonBinary(bad));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.dims(), other.dims());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Mask { height: self.height, width: self.width, data }
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        assert_eq!(self.dims(), other.dims());
        self.data.iter().zip(&other.data).filter(|(a, b)| **a != 0 && **b != 0).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Translate by `(dx, dy)`; pixels shifted past the border are dropped.
    pub fn shifted(&self, dx: i64, dy: i64) -> Mask {
        let mut out = Mask::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
        out
    }

    /// Bounding box as `(y0, x0, y1, x1)` inclusive, or `None` if empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    /// Max-pool by an integer factor: a cell is set if any covered pixel is.
    /// Partial blocks at the right/bottom edge are pooled over what exists.
    pub fn max_pool(&self, factor: usize) -> Mask {
        let h = self.height.div_ceil(factor);
        let w = self.width.div_ceil(factor);
        Mask::from_fn(h, w, |cy, cx| {
            let ys = cy * factor..((cy + 1) * factor).min(self.height);
            ys.into_iter().any(|y| {
                (cx * factor..((cx + 1) * factor).min(self.width)).any(|x| self.get(y, x))
            })
        })
    }

    /// Pad to `(height, width)` with zeros at the bottom/right.
    pub fn padded_to(&self, height: usize, width: usize) -> Mask {
        Mask::from_fn(height, width, |y, x| y < self.height && x < self.width && self.get(y, x))
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Any nonzero gray level counts as set.
    pub fn from_gray(img: &GrayImage) -> Mask {
        Mask::from_fn(img.height() as usize, img.width() as usize, |y, x| {
            img.get_pixel(x as u32, y as u32)[0] > 0
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Mask, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Mask::from_gray(&img.to_luma8()))
    }
}

/// Euclidean distance from every pixel to the nearest set pixel of `mask`
/// (0 inside the mask). Brute force over the mask bounding box dilated by
/// `cap`; distances beyond `cap` are reported as `f64::INFINITY`.
pub fn distance_to_mask(mask: &Mask, cap: usize) -> Vec<f64> {
    let (h, w) = mask.dims();
    let mut dist = vec![f64::INFINITY; h * w];
    let set: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .collect();
    let c = cap as i64;
    for &(my, mx) in &set {
        for dy in -c..=c {
            for dx in -c..=c {
                let (y, x) = (my as i64 + dy, mx as i64 + dx);
                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                    continue;
                }
                let d = ((dy * dy + dx * dx) as f64).sqrt();
                if d <= cap as f64 {
                    let slot = &mut dist[y as usize * w + x as usize];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
    }
    dist
}

pub fn encode_png(img: &Rgb8Image) -> Result<Vec<u8>, RasterError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<Rgb8Image, RasterError> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

/// ITU-R BT.601 luma in `[0, 255]`.
pub fn luma(img: &Rgb8Image) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Pixels outside `mask` are zeroed.
pub fn masked_out(img: &Rgb8Image, mask: &Mask) -> Rgb8Image {
    let mut out = img.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            *p = image::Rgb([0, 0, 0]);
        }
    }
    out
}
