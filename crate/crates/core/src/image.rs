//! Row-major RGB images with `f64` channels in `[0, 1]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3`, row-major, interleaved RGB.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::SizeMismatch {
                what: "image data",
                expected: width * height * 3,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: (0..width * height).flat_map(|_| rgb).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let k = 3 * (y * self.width + x);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let k = 3 * (y * self.width + x);
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub(crate) fn check_same(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ImageShape(self.dims(), other.dims()));
        }
        Ok(())
    }
}

impl From<&crate::rasterizer::RenderOutput> for Image {
    fn from(out: &crate::rasterizer::RenderOutput) -> Self {
        Self {
            width: out.width,
            height: out.height,
            data: out.rgb.clone(),
        }
    }
}
