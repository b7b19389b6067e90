//! Small dense-matrix core with reverse-mode differentiation.
//!
//! Everything is a row-major 2-D matrix (`rows x cols`; scalars are 1x1).
//! Computation is recorded on a [`Tape`] and differentiated with
//! [`Tape::backward`]. The element type is generic so the same model code
//! runs in f32 for training and in f64 for finite-difference checks.

mod gradcheck;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckFailure, GradcheckReport};
pub use tape::{attention, Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("softmax row {row} has every position masked")]
    FullyMasked { row: usize },
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("zero-norm vector in cosine distance")]
    ZeroNorm,
}

pub trait Scalar: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn row_vector(v: Vec<T>) -> Self {
        Self::new(1, v.len(), v)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|v| U::of(v.as_f64())).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                out.push(self.at(r, c));
            }
        }
        Self::new(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::Shape { op: "matmul", left: self.shape(), right: other.shape() });
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * p];
        for i in 0..n {
            let orow = &mut out[i * p..(i + 1) * p];
            for k in 0..m {
                let a = self.data[i * m + k];
                if a == T::zero() {
                    continue;
                }
                let brow = &other.data[k * p..(k + 1) * p];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Self::new(n, p, out))
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// Row-wise softmax; positions with `mask[c] == false` get weight zero.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>, TensorError> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let valid = |c: usize| mask.is_none_or(|m| m[c]);
        let mut max = T::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if valid(c) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(TensorError::FullyMasked { row: r });
        }
        let mut total = T::zero();
        let orow = &mut out.data[r * x.cols..(r + 1) * x.cols];
        for (c, &v) in row.iter().enumerate() {
            if valid(c) {
                let e = (v - max).exp();
                orow[c] = e;
                total = total + e;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / total;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let m = Tensor::<f64>::from_f64(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Tensor::identity(3).matmul(&m).unwrap(), m);
        let a = Tensor::<f64>::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::from_f64(2, 1, &[1.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
        assert!(a.matmul(&m).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..15).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
        let ta = Tensor::<f64>::from_f64(4, 5, &a);
        let tb = Tensor::<f64>::from_f64(5, 3, &b);
        let c = ta.matmul(&tb).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a[i * 5 + k] * b[k * 3 + j];
                }
                assert!((c.at(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::<f64>::from_f64(1, 2, &[0.0, 0.0]), None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::<f32>::from_f64(1, 2, &[1000.0, 0.0]), None).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
        let s = softmax_rows(&Tensor::<f64>::from_f64(1, 3, &[0.3, 9.0, -0.2]), Some(&[true, false, true])).unwrap();
        assert_eq!(s.at(0, 1), 0.0);
        assert!((s.at(0, 0) + s.at(0, 2) - 1.0).abs() < 1e-15);
        assert_eq!(
            softmax_rows(&Tensor::<f64>::zeros(1, 2), Some(&[false, false])),
            Err(TensorError::FullyMasked { row: 0 })
        );
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let x = [0.3, -1.2, 2.5, 0.0, 0.7];
        let s = softmax_rows(&Tensor::<f64>::from_f64(1, 5, &x), None).unwrap();
        let denom: f64 = x.iter().map(|v| v.exp()).sum();
        for (i, v) in x.iter().enumerate() {
            assert!((s.at(0, i) - v.exp() / denom).abs() < 1e-7);
        }
    }
}
