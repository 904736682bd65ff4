//! Dense tensor values and the reverse-mode differentiation tape.
//!
//! Layout is row-major with semantic axis order (batch, channel, height,
//! width); lower ranks are allowed. Element storage is generic over
//! [`Real`]: production code runs on `f32`, gradient verification runs the
//! same operation set on `f64`. Reductions always accumulate in `f64`
//! regardless of the storage type.

mod tape;

pub mod gradcheck;

pub use tape::{Tape, TensorId};

use thiserror::Error;

/// Scalar element type of a tensor. Arithmetic inside ops is routed
/// through `f64` (`to_f64` / `from_f64`), so the storage type only decides
/// rounding at store time.
pub trait Real: Copy + PartialOrd + std::fmt::Debug + Send + Sync + 'static {
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_val(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn is_finite_val(self) -> bool {
        self.is_finite()
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid dims {dims:?}: {reason}")]
    InvalidDims { dims: Vec<usize>, reason: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense rank-<=4 tensor. Immutable after construction; all mutation goes
/// through tape-recorded operations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, validating rank, extent positivity, element count
    /// and finiteness.
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(TensorError::InvalidDims {
                dims: dims.to_vec(),
                reason: "rank must be 1..=4".into(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidDims {
                dims: dims.to_vec(),
                reason: "zero extent".into(),
            });
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidDims {
                dims: dims.to_vec(),
                reason: format!("product {} != data length {}", numel, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite_val()) {
            return Err(TensorError::NonFinite { op: "tensor construction" });
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let numel: usize = dims.iter().product();
        Tensor::new(dims, vec![T::ZERO; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![1], data: vec![T::from_f64(v)] }
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let numel: usize = dims.iter().product();
        let mut f = f;
        let data = (0..numel).map(|i| T::from_f64(f(i))).collect();
        Tensor::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Scalar accessor; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0].to_f64()
    }

    /// Extents padded to rank 4 as (n, c, h, w) with missing leading axes
    /// treated as size 1 trailing axes. Rank 1 is (1,d,1,1), rank 2 is
    /// (d0,d1,1,1), rank 3 is (d0,d1,d2,1).
    pub fn nchw(&self) -> (usize, usize, usize, usize) {
        match *self.dims.as_slice() {
            [c] => (1, c, 1, 1),
            [n, c] => (n, c, 1, 1),
            [n, c, h] => (n, c, h, 1),
            [n, c, h, w] => (n, c, h, w),
            _ => unreachable!(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Converts storage type; f32 -> f64 is lossless.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 2, 3, 4, 5], vec![0.0; 120]).is_err());
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::new(&[2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn cast_roundtrip_is_lossless_for_f32() {
        let t = Tensor::<f32>::new(&[3], vec![1.25, -0.5, 3.75]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
