//! Dense row-major f64 tensors and u8 label maps.
//!
//! These are plain value types: no autodiff state lives here. A tensor's
//! data length always equals the product of its shape, and public
//! constructors reject non-finite values so NaN/Inf can only arise inside
//! numeric code where it is checked explicitly.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the shape product.
    LengthMismatch { shape: Vec<usize>, expected: usize, actual: usize },
    /// A non-finite value at construction time.
    NonFinite { index: usize, value: f64 },
    /// A scalar was required.
    NotScalar { shape: Vec<usize> },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::LengthMismatch { shape, expected, actual } => write!(
                f,
                "tensor data length {actual} does not match shape {shape:?} (expected {expected})"
            ),
            TensorError::NonFinite { index, value } => {
                write!(f, "non-finite value {value} at flat index {index}")
            }
            TensorError::NotScalar { shape } => {
                write!(f, "expected a scalar tensor, got shape {shape:?}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

impl Tensor {
    /// Validating constructor: checks length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch { shape, expected, actual: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by checked numeric code.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64, TensorError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar { shape: self.shape.clone() })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A per-pixel class assignment for one slice, classes in 0..num_classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, TensorError> {
        if data.len() != height * width {
            return Err(TensorError::LengthMismatch {
                shape: vec![height, width],
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
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

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }
}

/// One training or evaluation unit: a multi-channel image and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            TensorError::LengthMismatch { expected, actual, .. } => {
                assert_eq!((expected, actual), (6, 5));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap_err();
        match err {
            TensorError::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn scalar_accessors() {
        let s = Tensor::scalar(4.5).unwrap();
        assert!(s.is_scalar());
        assert_eq!(s.scalar_value().unwrap(), 4.5);
        let t = Tensor::zeros(vec![2, 2]);
        assert!(t.scalar_value().is_err());
    }

    #[test]
    fn label_map_indexing() {
        let mut m = LabelMap::zeros(2, 3);
        m.set(1, 2, 3);
        assert_eq!(m.get(1, 2), 3);
        assert_eq!(m.get(0, 0), 0);
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }
}
