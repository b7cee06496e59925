use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> NdArray<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Rank { op: "NdArray::new", expected: 1, got: 0 });
        }
        if shape.contains(&0) {
            return Err(Error::Config("array dimensions must be at least 1".into()));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("NdArray::new", "data length", len, data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(&mut f).collect();
        Self::new(shape, data).expect("from_fn shape")
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), len));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len()).unwrap()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.sum_sq().sqrt()
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type, e.g. for 32-bit storage of 64-bit values.
    pub fn cast<U: Real>(&self) -> NdArray<U> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Rank { op, expected: rank, got: self.rank() });
        }
        Ok(())
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.rank() != other.rank() {
            return Err(Error::Rank { op, expected: self.rank(), got: other.rank() });
        }
        for (&a, &b) in self.shape.iter().zip(&other.shape) {
            if a != b {
                return Err(Error::shape(op, "operand dimension", a, b));
            }
        }
        Ok(())
    }
}

/// Real and imaginary planes of a complex image.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexPair<T> {
    pub re: NdArray<T>,
    pub im: NdArray<T>,
}

impl<T: Real> ComplexPair<T> {
    pub fn new(re: NdArray<T>, im: NdArray<T>) -> Result<Self> {
        re.expect_same_shape("ComplexPair::new", &im)?;
        Ok(Self { re, im })
    }

    pub fn from_real(re: NdArray<T>) -> Self {
        let im = NdArray::zeros(re.shape());
        Self { re, im }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { re: NdArray::zeros(shape), im: NdArray::zeros(shape) }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    /// Pointwise modulus.
    pub fn magnitude(&self) -> NdArray<T> {
        self.re.zip_map(&self.im, |a, b| a.hypot(b))
    }

    /// Sum of squared moduli.
    pub fn norm_sq(&self) -> T {
        self.re.sum_sq() + self.im.sum_sq()
    }
}
