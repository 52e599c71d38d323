//! Core value types: flat float tensors, grayscale images, keypoints.

use crate::error::{Error, Result};

/// N-dimensional row-major container of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("tensor shape must be non-empty"));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor dimensions must be positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && numel > 0, "invalid tensor shape {shape:?}");
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value at `(row, col)` of a rank-2 tensor.
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, v: f32) {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col] = v;
    }
}

/// Single-channel image with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    pub height: usize,
    pub width: usize,
    pixels: Tensor,
}

impl ImageGray {
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "image tensor must be rank 2, got shape {:?}",
                pixels.shape()
            )));
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("image pixels must lie in [0, 1]"));
        }
        Ok(ImageGray {
            height: pixels.shape()[0],
            width: pixels.shape()[1],
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageGray {
            height,
            width,
            pixels: Tensor::zeros(vec![height, width]),
        }
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels.at2(row, col)
    }

    /// Set a pixel, clamping into `[0, 1]`.
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.pixels.set2(row, col, v.clamp(0.0, 1.0));
    }
}

/// Subpixel image location with a confidence score. The only matching token
/// in the whole pipeline; there is deliberately no descriptor field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Coordinate along width.
    pub x: f64,
    /// Coordinate along height.
    pub y: f64,
    /// Confidence in `[0, 1]`.
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Keypoint { x, y, score }
    }

    pub fn dist(&self, other: &Keypoint) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}
