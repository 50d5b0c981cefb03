//! Dense tensors, the autodiff tape, and the AdamW optimizer.

pub mod adamw;
pub mod tape;

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Element type for all numeric work: f32 for training runs, f64 for
/// gradient checks.
pub trait Scalar:
    num_traits::Float + Debug + Display + Send + Sync + 'static
{
    /// Canonical byte width, recorded in checkpoints.
    const WIDTH: u8;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix (rank 1 tensors are 1×n rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dimension(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        let data = values.iter().map(|&v| S::from_f64(v)).collect();
        Tensor::new(rows, cols, data)
    }

    /// 1×n row vector.
    pub fn row(values: Vec<S>) -> Self {
        let cols = values.len();
        Tensor {
            rows: 1,
            cols,
            data: values,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Single entry of a 1×1 tensor.
    pub fn item(&self) -> Result<S> {
        if self.rows != 1 || self.cols != 1 {
            return Err(Error::contract(format!(
                "expected scalar tensor, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn transpose(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Canonical encoding: every element as f64 little-endian bytes. Exact
    /// for both f32 and f64 payloads, so hashes and checkpoints are
    /// precision-stable.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8 + 16);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out
    }
}

/// Row-major matrix product into a fresh tensor.
///
/// Accumulates over the inner index in ascending order for every output
/// element, so cached and full-recompute attention paths agree bitwise.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.cols() != b.rows() {
        return Err(Error::dimension(format!(
            "matmul inner dimensions disagree: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(p, r);
    for i in 0..p {
        for j in 0..r {
            let mut acc = S::zero();
            for k in 0..q {
                acc = acc + a.at(i, k) * b.at(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}
