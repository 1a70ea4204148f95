//! Dense row-major tensors and the matrix kernels shared by the autodiff graph.
//!
//! Every reduction runs left to right in index order so results are
//! reproducible bit for bit.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
}

/// An immutable dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!("tensor of shape {shape:?} needs {numel} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Rows and columns of a 2-D tensor. A 1-D tensor is a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [c] => Ok((1, *c)),
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Contract(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = *self.shape.last().unwrap_or(&0);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| {
            let x = v.as_f64();
            acc + x * x
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0f64, |acc, (a, b)| acc.max((a.as_f64() - b.as_f64()).abs()))
    }

    /// Standalone matrix product, outside any graph.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (p, q) = self.dims2()?;
        let (q2, s) = other.dims2()?;
        if q != q2 || self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        Ok(Self { shape: vec![p, s], data: mm(&self.data, &other.data, p, q, s) })
    }
}

impl<T: Scalar> Default for Tensor<T> {
    fn default() -> Self {
        Tensor::zeros(&[0])
    }
}

/// `a[p×q] · b[q×s]`.
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * s];
    for i in 0..p {
        let out_row = &mut out[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[k * s..(k + 1) * s];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// `a[p×q] · b[s×q]ᵀ`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * s];
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..s {
            let b_row = &b[j * q..(j + 1) * q];
            out[i * s + j] = dot(a_row, b_row);
        }
    }
    out
}

/// `a[q×p]ᵀ · b[q×s]`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], q: usize, p: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * s];
    for k in 0..q {
        let b_row = &b[k * s..(k + 1) * s];
        for i in 0..p {
            let aki = a[k * p + i];
            if aki == T::zero() {
                continue;
            }
            let out_row = &mut out[i * s..(i + 1) * s];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aki * bv;
            }
        }
    }
    out
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let eye = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn mismatched_inner_extent_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = a.matmul(&a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_kernels_agree_with_plain_product() {
        // a: 2×3, b: 3×2
        let a = [1.0, -2.0, 0.5, 3.0, 1.0, -1.0];
        let b = [2.0, 1.0, 0.0, -1.0, 4.0, 0.5];
        let ab = mm(&a, &b, 2, 3, 2);
        // bᵀ stored as 2×3
        let bt = [2.0, 0.0, 4.0, 1.0, -1.0, 0.5];
        assert_eq!(mm_nt(&a, &bt, 2, 3, 2), ab);
        // aᵀ stored as 3×2
        let at = [1.0, 3.0, -2.0, 1.0, 0.5, -1.0];
        assert_eq!(mm_tn(&at, &b, 3, 2, 2), ab);
    }

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
