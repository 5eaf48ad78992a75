//! Dense tensor core with reverse-mode automatic differentiation.
//!
//! Everything is row-major, contiguous and 32-bit float by default. The same
//! code instantiates with `f64` for gradient verification, which is the only
//! reason the element type is generic.

mod init;
mod tape;

pub use init::{derive_seed, ParamInit};
pub use tape::{Gradients, Op, Tape, Var};

use thiserror::Error;

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

/// Dense row-major tensor. Extents may be zero (empty batches are legal).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-2 tensor from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self, TensorError> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("row length {} != {}", row.len(), n_cols),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), n_cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single value of a rank-0 / single-element tensor.
    pub fn scalar_value(&self) -> Result<E, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    /// Cast every element, e.g. to widen an `f32` tensor to `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub(crate) fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Integer index array (embedding indices, class targets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl IntTensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<u32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn scalar_has_rank_zero() {
        let t = Tensor::scalar(3.5f32);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.scalar_value().unwrap(), 3.5);
    }

    #[test]
    fn zero_extent_is_legal() {
        let t = Tensor::<f32>::zeros(vec![0, 4]);
        assert_eq!(t.len(), 0);
        assert_eq!(t.shape(), &[0, 4]);
    }

    #[test]
    fn cast_round_trips_f32_exactly() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![0.1, -2.5, 7.0]).unwrap();
        let wide: Tensor<f64> = t.cast();
        let back: Tensor<f32> = wide.cast();
        assert_eq!(t, back);
    }
}
