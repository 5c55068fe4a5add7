//! Image containers shared by the renderer, fusion and dataset code.

use crate::error::{shape_err, Result};

/// Stack of per-band RGB spectrum maps, laid out `[y][x][band][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumMapStack {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f64>,
}

impl SpectrumMapStack {
    pub fn zeros(width: usize, height: usize, bands: usize) -> Self {
        Self {
            width,
            height,
            bands,
            data: vec![0.0; width * height * bands * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * bands * 3 {
            return Err(shape_err(format!(
                "stack {width}x{height}x{bands}x3 needs {} values, got {}",
                width * height * bands * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bands,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, band: usize, channel: usize) -> usize {
        ((y * self.width + x) * self.bands + band) * 3 + channel
    }

    pub fn get(&self, x: usize, y: usize, band: usize, channel: usize) -> f64 {
        self.data[self.index(x, y, band, channel)]
    }

    pub fn set(&mut self, x: usize, y: usize, band: usize, channel: usize, v: f64) {
        let i = self.index(x, y, band, channel);
        self.data[i] = v;
    }

    /// The `3 * bands` values of one pixel.
    pub fn pixel(&self, p: usize) -> &[f64] {
        let n = self.bands * 3;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let n = self.bands * 3;
        &mut self.data[p * n..(p + 1) * n]
    }

    /// Copy of one band as an RGB image.
    pub fn band(&self, band: usize) -> RgbImage {
        let mut out = RgbImage::zeros(self.width, self.height);
        for p in 0..self.pixels() {
            for c in 0..3 {
                out.data[p * 3 + c] = self.data[(p * self.bands + band) * 3 + c];
            }
        }
        out
    }

    pub fn set_band(&mut self, band: usize, img: &RgbImage) -> Result<()> {
        if img.width != self.width || img.height != self.height {
            return Err(shape_err("band image size differs from stack"));
        }
        for p in 0..self.pixels() {
            for c in 0..3 {
                self.data[(p * self.bands + band) * 3 + c] = img.data[p * 3 + c];
            }
        }
        Ok(())
    }

    /// Planar `[band*3 + channel][y][x]` copy, the channel-first layout used by
    /// convolutional networks.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixels();
        let ch = self.bands * 3;
        let mut out = vec![0.0; n * ch];
        for p in 0..n {
            for c in 0..ch {
                out[c * n + p] = self.data[p * ch + c];
            }
        }
        out
    }
}

/// Linear RGB image, interleaved `[y][x][channel]`. Values may leave `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_err(format!(
                "rgb image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Values clamped to `[0, 1]`, for export only.
    pub fn clamped(&self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * 3];
        for p in 0..n {
            for c in 0..3 {
                out[c * n + p] = self.data[p * 3 + c];
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Result<Self> {
        let n = width * height;
        if planar.len() != n * 3 {
            return Err(shape_err("planar buffer size"));
        }
        let mut data = vec![0.0; n * 3];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = planar[c * n + p];
            }
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}
