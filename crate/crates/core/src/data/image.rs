use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Height × width × channels image with values in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("image", format!("{} values for {height}x{width}x{channels}", data.len())));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::shape("image", format!("unsupported channel count {channels}")));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("image shape")
    }

    /// Network input: pixels rescaled from [0, 1] to [-1, 1].
    pub fn to_input<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(2.0 * v as f64 - 1.0)).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("image shape")
    }

    /// Luma plane using ITU-R BT.601 weights (0.299, 0.587, 0.114).
    pub fn luma(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| v as f64).collect(),
            _ => self.data.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect(),
        }
    }

    /// Decodes a PNG, converts to `channels` and resizes to `size`×`size`
    /// when the stored dimensions differ.
    pub fn load_png(path: &Path, size: usize, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
        Self::from_dynamic(img, size, channels)
    }

    pub fn from_dynamic(img: DynamicImage, size: usize, channels: usize) -> Result<Self> {
        let s = size as u32;
        match channels {
            1 => {
                let mut g = img.to_luma8();
                if g.dimensions() != (s, s) {
                    g = image::imageops::resize(&g, s, s, FilterType::Triangle);
                }
                Self::from_u8(size, size, 1, g.as_raw())
            }
            3 => {
                let mut c = img.to_rgb8();
                if c.dimensions() != (s, s) {
                    c = image::imageops::resize(&c, s, s, FilterType::Triangle);
                }
                Self::from_u8(size, size, 3, c.as_raw())
            }
            n => Err(Error::config(format!("unsupported image channel count {n}"))),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_u8();
        let res = if self.channels == 1 {
            GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path)
        } else {
            RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path)
        };
        res.map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_values_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5) as u8).collect();
        let img = Image::from_u8(4, 4, 3, &bytes).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p, 4, 3).unwrap(), img);
    }

    #[test]
    fn load_resizes_and_converts() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_u8(8, 8, 3, &[200; 8 * 8 * 3]).unwrap();
        let p = dir.path().join("b.png");
        img.save_png(&p).unwrap();
        let small = Image::load_png(&p, 4, 1).unwrap();
        assert_eq!((small.height, small.width, small.channels), (4, 4, 1));
        assert!(small.data.iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(Image::load_png(Path::new("/nonexistent/x.png"), 4, 3).is_err());
    }

    #[test]
    fn luma_weights() {
        let img = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.luma()[0] - 0.299).abs() < 1e-7);
    }
}
