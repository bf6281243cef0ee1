//! 8-bit image buffers and their conversion to and from tensors.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luma(rgb: [u8; 3]) -> f64 {
    LUMA_WEIGHTS[0] * f64::from(rgb[0]) + LUMA_WEIGHTS[1] * f64::from(rgb[1]) + LUMA_WEIGHTS[2] * f64::from(rgb[2])
}

fn check_len(width: usize, height: usize, channels: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("empty image {width}x{height}")));
    }
    let want = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::invalid("image dimensions overflow"))?;
    if want != len {
        return Err(Error::invalid(format!(
            "{len} bytes for a {width}x{height}x{channels} image"
        )));
    }
    Ok(())
}

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, 3, data.len())?;
        Ok(RgbImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<RgbImage> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(RgbImage { width, height, data })
    }

    /// Unrounded BT.601 luma per pixel.
    pub fn luma_plane(&self) -> LumaPlane {
        LumaPlane {
            width: self.width,
            height: self.height,
            values: self
                .data
                .chunks_exact(3)
                .map(|p| luma([p[0], p[1], p[2]]))
                .collect(),
        }
    }

    /// Luma rounded to 8 bits.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .chunks_exact(3)
                .map(|p| luma([p[0], p[1], p[2]]).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, 1, data.len())?;
        Ok(GrayImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn luma_plane(&self) -> LumaPlane {
        LumaPlane {
            width: self.width,
            height: self.height,
            values: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Real-valued single-channel image on the 0–255 scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LumaPlane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl LumaPlane {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, 1, values.len())?;
        Ok(LumaPlane { width, height, values })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

impl From<&RgbImage> for LumaPlane {
    fn from(img: &RgbImage) -> Self {
        img.luma_plane()
    }
}

impl From<&GrayImage> for LumaPlane {
    fn from(img: &GrayImage) -> Self {
        img.luma_plane()
    }
}

/// Stacks same-sized images into an `(N, 3, H, W)` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Element>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("no images to stack"))?;
    let (w, h) = (first.width, first.height);
    if let Some(bad) = images.iter().find(|i| i.width != w || i.height != h) {
        return Err(Error::shape(format!(
            "cannot stack {}x{} with {w}x{h}",
            bad.width, bad.height
        )));
    }
    let scale = T::from_f64_lossy(255.0);
    let shape = Shape::new(images.len(), 3, h, w);
    let mut data = Vec::with_capacity(shape.numel());
    for img in images {
        for c in 0..3 {
            data.extend(img.data.iter().skip(c).step_by(3).map(|&v| T::from_u8(v).expect("u8") / scale));
        }
    }
    Tensor::new(shape, data)
}

/// Inverse of [`images_to_tensor`]: clamps to `[0, 1]` and rounds to 8 bits.
pub fn tensor_to_images<T: Element>(t: &Tensor<T>) -> Result<Vec<RgbImage>> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {s}")));
    }
    let plane = s.plane();
    Ok((0..s.n)
        .map(|n| {
            let item = &t.data()[n * 3 * plane..][..3 * plane];
            let mut data = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    data.push(unit_to_u8(item[c * plane + p].as_f64()));
                }
            }
            RgbImage {
                width: s.w,
                height: s.h,
                data,
            }
        })
        .collect())
}

/// Maps `[0, 1]` to `0..=255`, rounding half away from zero.
pub fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
