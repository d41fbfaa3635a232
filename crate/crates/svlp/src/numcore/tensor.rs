//! Dense row-major tensors generic over the two supported float widths.
//!
//! Training runs in f32; verification (gradient checking, oracle comparisons)
//! runs the same code in f64. The `Real` trait is the small surface both
//! widths share.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Element width tag used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Scalar type the engine computes in: f32 for training, f64 for verification.
pub trait Real:
    Copy
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self;
    fn one() -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_v(self, other: Self) -> Self;
    fn min_v(self, other: Self) -> Self;
    fn powi(self, n: i32) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max_v(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn min_v(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn powi(self, n: i32) -> Self {
        f32::powi(self, n)
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max_v(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min_v(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Dense row-major tensor. Invariant: `product(shape) == data.len()` and all
/// stored scalars are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|v| T::from_f64(*v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a matrix; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a matrix; a 1-D tensor of length n has n columns.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn scalar_value(&self) -> Result<T> {
        if !self.is_scalar() {
            return Err(Error::NotScalar {
                numel: self.numel(),
            });
        }
        Ok(self.data[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_length_mismatch_is_an_error() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_data_is_an_error() {
        assert!(Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::<f32>::new(vec![1], vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn rows_and_cols_follow_row_major_convention() {
        let t = Tensor::<f64>::zeros(vec![3, 4]);
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 4);
        let v = Tensor::<f64>::zeros(vec![5]);
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cols(), 5);
    }
}
