//! RGBA float images and 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// RGBA image with channels in `[0, 1]`, row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: u32,
    pub height: u32,
    pub rgba: Vec<f32>,
}

impl ImageBuffer {
    /// White canvas with alpha 0 everywhere.
    pub fn new(width: u32, height: u32) -> Self {
        let mut rgba = vec![1.0f32; width as usize * height as usize * 4];
        for px in rgba.chunks_exact_mut(4) {
            px[3] = 0.0;
        }
        Self {
            width,
            height,
            rgba,
        }
    }

    pub fn filled(width: u32, height: u32, px: [f64; 4]) -> Self {
        let mut img = Self::new(width, height);
        for p in 0..img.pixel_count() {
            img.set_pixel(p, px);
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn pixel(&self, p: usize) -> [f64; 4] {
        let s = &self.rgba[p * 4..p * 4 + 4];
        [s[0] as f64, s[1] as f64, s[2] as f64, s[3] as f64]
    }

    pub fn rgb(&self, p: usize) -> [f64; 3] {
        let s = &self.rgba[p * 4..p * 4 + 3];
        [s[0] as f64, s[1] as f64, s[2] as f64]
    }

    pub fn alpha(&self, p: usize) -> f64 {
        self.rgba[p * 4 + 3] as f64
    }

    pub fn set_pixel(&mut self, p: usize, v: [f64; 4]) {
        for (dst, src) in self.rgba[p * 4..p * 4 + 4].iter_mut().zip(v) {
            *dst = src.clamp(0.0, 1.0) as f32;
        }
    }

    /// Snap every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            rgba: self.rgba.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        self.rgba.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgba8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width as usize * height as usize * 4 {
            return Err(Error::Shape(format!(
                "{}x{} RGBA needs {} bytes, got {}",
                width,
                height,
                width as usize * height as usize * 4,
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            rgba: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ::image::save_buffer_with_format(
            path,
            &self.to_rgba8(),
            self.width,
            self.height,
            ::image::ExtendedColorType::Rgba8,
            ::image::ImageFormat::Png,
        )
        .map_err(|e| match e {
            ::image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = ::image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgba8();
        let (w, h) = img.dimensions();
        Self::from_rgba8(w, h, img.as_raw())
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageBuffer::new(9, 8);
        for p in 0..img.pixel_count() {
            let x = p as f64 / 72.0;
            img.set_pixel(p, [x, 1.0 - x, 0.5 * x, (p % 2) as f64]);
        }
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
        assert_eq!(back.quantized(), back);
    }

    #[test]
    fn missing_png_names_path() {
        let err = ImageBuffer::load_png("/nonexistent/x.png").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
