//! Minimal reverse-mode differentiation layer.
//!
//! Everything the detector trains with lives here: conv2d, 1×1 conv, relu,
//! sigmoid, batch norm, bicubic ×2 upsampling, elementwise add, the focal
//! loss, both consistency losses, and Adam. Computation is 64-bit
//! throughout so every operation can be validated against central finite
//! differences; tensors cross into the 32-bit [`crate::tensor::Tensor`]
//! world only at checkpoint boundaries.

mod adam;
mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{BatchNormState, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense f64 array with a shape, the working value type of the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Array {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Quantize to the 32-bit storage type.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("array shape is consistent")
    }
}
