use std::path::Path;

use crate::error::{Error, Result};

/// Per-channel normalization statistics of the pretrained backbone.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_5, 0.261_302_6, 0.275_777_1];

/// A normalized RGB image stored channel-major (`C × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DecodedImage {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn from_chw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape {
                expected: format!("{} values", Self::CHANNELS * height * width),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Converts an 8-bit RGB buffer, resizing to `size × size` and normalizing.
    pub fn from_rgb(img: &::image::RgbImage, size: usize) -> Self {
        let resized;
        let img = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized = ::image::imageops::resize(
                img,
                size as u32,
                size as u32,
                ::image::imageops::FilterType::Triangle,
            );
            &resized
        };
        let mut out = Self::zeros(size, size);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..Self::CHANNELS {
                let v = f32::from(px[c]) / 255.0;
                out.set(c, y as usize, x as usize, (v - CLIP_MEAN[c]) / CLIP_STD[c]);
            }
        }
        out
    }
}

/// Decodes an image file and applies resize + normalize.
pub fn load_image(path: &Path, size: usize) -> Result<DecodedImage> {
    let img = ::image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(DecodedImage::from_rgb(&img.to_rgb8(), size))
}
