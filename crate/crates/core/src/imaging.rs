//! Planar-interleaved f64 images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    pub fn ensure_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    /// Mean over channels, one value per pixel.
    pub fn to_gray(&self) -> Image {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| p.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Writes an 8-bit PNG. Three-channel images are written as RGB, four as
    /// RGBA, one as grayscale.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            4 => image::RgbaImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
        }
        .expect("buffer length checked at construction")?;
        Ok(())
    }

    /// Reads a PNG as RGBA in [0, 1].
    pub fn load_rgba(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgba8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::new(w as usize, h as usize, 4, data)
    }

    /// Splits an RGBA image into RGB and alpha.
    pub fn split_alpha(&self) -> Result<(Image, Image)> {
        if self.channels != 4 {
            return Err(Error::Shape(format!("expected RGBA, got {} channels", self.channels)));
        }
        let mut rgb = Vec::with_capacity(self.pixel_count() * 3);
        let mut alpha = Vec::with_capacity(self.pixel_count());
        for p in self.data.chunks_exact(4) {
            rgb.extend_from_slice(&p[..3]);
            alpha.push(p[3]);
        }
        Ok((
            Image::new(self.width, self.height, 3, rgb)?,
            Image::new(self.width, self.height, 1, alpha)?,
        ))
    }

    pub fn join_alpha(rgb: &Image, alpha: &Image) -> Result<Image> {
        if rgb.channels != 3 || alpha.channels != 1 || rgb.pixel_count() != alpha.pixel_count() {
            return Err(Error::Shape("join_alpha needs RGB and a matching alpha plane".into()));
        }
        let mut data = Vec::with_capacity(rgb.pixel_count() * 4);
        for (p, a) in rgb.data.chunks_exact(3).zip(&alpha.data) {
            data.extend_from_slice(p);
            data.push(*a);
        }
        Image::new(rgb.width, rgb.height, 4, data)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let data: Vec<f64> = (0..4 * 3 * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::new(4, 3, 4, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_rgba(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let (rgb, alpha) = back.split_alpha().unwrap();
        assert_eq!(Image::join_alpha(&rgb, &alpha).unwrap(), back);
    }

    #[test]
    fn shape_errors() {
        assert!(Image::new(2, 2, 3, vec![0.0; 11]).is_err());
        let a = Image::zeros(2, 2, 3);
        assert!(a.ensure_same_shape(&Image::zeros(2, 2, 1)).is_err());
    }
}
