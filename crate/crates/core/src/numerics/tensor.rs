use std::sync::Arc;

use super::NumericsError;
use crate::Scalar;

/// Dense row-major array. The last dimension is the "column" axis; every
/// other dimension folds into rows for the row-wise operations.
///
/// Storage is shared copy-on-write, so clones are cheap until written.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumericsError> {
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(NumericsError::InvalidShape { shape, len: data.len() });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: Arc::new(vec![T::zero(); n]) }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from `f64` rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().map(|&x| T::lit(x))).collect();
        Self { shape: vec![rows.len(), cols], data: Arc::new(data) }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Width of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as a `rows × cols` matrix.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data_mut()[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T, NumericsError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::NotScalar { shape: self.shape.clone() })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                    .collect(),
            ),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NumericsError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NumericsError::InvalidShape { shape, len: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Rows `start..start + len` as a new `len × cols` matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self, NumericsError> {
        let c = self.cols();
        if start + len > self.rows() {
            return Err(NumericsError::IndexOutOfRange { index: start + len, bound: self.rows() });
        }
        Ok(Self { shape: vec![len, c], data: Arc::new(self.data[start * c..(start + len) * c].to_vec()) })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }
}
