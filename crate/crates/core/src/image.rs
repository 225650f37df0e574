//! Raster image type shared by every pipeline: H x W x C, values in [0, 1],
//! stored channel-planar (all of channel 0, then channel 1, ...).

use crate::error::{Error, Result};
use crate::tensorfft::Grid2D;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dimension(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("image contains non-finite values"));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copy of one channel plane as a dense grid.
    pub fn channel(&self, c: usize) -> Grid2D {
        let plane = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
        Grid2D::new(self.height, self.width, plane.to_vec())
            .expect("channel plane has matching dimensions")
    }

    /// Assemble an image from per-channel grids (all same size).
    pub fn from_channels(planes: &[Grid2D]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::dimension("image needs at least one channel"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(h * w * planes.len());
        for p in planes {
            if p.height() != h || p.width() != w {
                return Err(Error::dimension("channel planes disagree in size"));
            }
            data.extend_from_slice(p.data());
        }
        Image::new(h, w, planes.len(), data)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Max absolute per-pixel difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::dimension("image shapes differ"));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_roundtrip() {
        let img = Image::new(2, 3, 2, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap();
        let planes: Vec<Grid2D> = (0..2).map(|c| img.channel(c)).collect();
        let back = Image::from_channels(&planes).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Image::new(1, 2, 1, vec![0.0, f64::NAN]).is_err());
    }
}
