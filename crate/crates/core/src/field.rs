use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image geometry `c × h × w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    /// A flat `1 × 1 × n` shape, used by the few-pixel oracle models.
    pub const fn flat(n: usize) -> Self {
        Self::new(1, 1, n)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A flattened `c × h × w` image (row-major, channel outermost).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelField {
    shape: Shape,
    data: Array1<f64>,
}

impl PixelField {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Self::from_array(shape, Array1::from(data))
    }

    pub fn from_array(shape: Shape, data: Array1<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch { expected: shape.len(), got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pixel field".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: Array1::zeros(shape.len()) }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, data: Array1::from_elem(shape.len(), value) }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Array1<f64> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("pixel fields are contiguous")
    }

    pub fn into_data(self) -> Array1<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    pub(crate) fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::ShapeMismatch { expected, got: self.len() });
        }
        Ok(())
    }
}
