//! Dense per-pixel containers shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest image side accepted anywhere in the pipeline.
pub const MIN_SIDE: usize = 8;

/// Unit-interval image stored row-major with channels interleaved (`HWC`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from planar (`CHW`) data, clamping into `[0,1]`.
    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f64]) -> Result<Self> {
        let hw = height * width;
        if planar.len() != hw * channels {
            return Err(Error::shape(hw * channels, planar.len()));
        }
        let mut data = vec![0.0; hw * channels];
        for c in 0..channels {
            for p in 0..hw {
                data[p * channels + c] = planar[c * hw + p].clamp(0.0, 1.0);
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// Mean over channels at one pixel.
    pub fn intensity(&self, row: usize, col: usize) -> f64 {
        let base = (row * self.width + col) * self.channels;
        self.data[base..base + self.channels].iter().sum::<f64>() / self.channels as f64
    }

    /// Channel-major copy used by the convolution kernels.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.pixels();
        let mut out = vec![0.0; hw * self.channels];
        for p in 0..hw {
            for c in 0..self.channels {
                out[c * hw + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-pixel probability of the salient class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ProbMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// Binary ground-truth saliency mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn salient_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}
