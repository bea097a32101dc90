//! Dense row-major tensors and the forward kernels the autodiff graph is
//! built from.
//!
//! Kernels here are pure: they never touch gradient slots. The graph in
//! [`crate::graph`] records which kernel produced which value and applies the
//! matching gradient rule on the way back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    #[serde(skip)]
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("dimension sizes must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![v; n], grad: None }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], values: vec![v], grad: None }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.values[i * n + i] = T::one();
        }
        t
    }

    /// Builds an `m×n` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    /// Installs a zero gradient slot if none is present.
    pub fn ensure_grad(&mut self) -> &mut Vec<T> {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows and columns of a matrix; a vector counts as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        let cols = *self.shape.last().unwrap();
        self.values[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap();
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 || !self.is_matrix() || !other.is_matrix() {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.values[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (t, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.values[t * n..(t + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.values[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    fn zip_with(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), values, grad: None })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), values: self.values.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let (_, n) = self.dims2()?;
        if row.len() != n {
            return Err(Error::shape("add_row", &self.shape, &row.shape));
        }
        let mut out = self.clone();
        out.grad = None;
        for chunk in out.values.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(&row.values) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (_, n) = self.dims2()?;
        let mut out = self.clone();
        out.grad = None;
        for row in out.values.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(out)
    }

    /// Per-row `γ ⊙ (x − mean)/√(var + eps) + β` with population variance.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        Ok(layer_norm_forward(self, gamma, beta, eps)?.0)
    }

    /// Rows `indices[i]` of a matrix (embedding lookup).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut values = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Index(format!("row {i} out of range for {m} rows")));
            }
            values.extend_from_slice(&self.values[i * n..(i + 1) * n]);
        }
        if indices.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        Self::new(vec![indices.len(), n], values)
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if start + width > n || width == 0 {
            return Err(Error::Shape(format!("columns {start}..{} out of range for width {n}", start + width)));
        }
        let mut values = Vec::with_capacity(m * width);
        for i in 0..m {
            values.extend_from_slice(&self.values[i * n + start..i * n + start + width]);
        }
        Self::new(vec![m, width], values)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (m, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                values.extend_from_slice(&p.values[i * w..(i + 1) * w]);
            }
        }
        Self::new(vec![m, n], values)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, n) = first.dims2()?;
        let mut values = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::shape("concat_rows", first.shape(), p.shape()));
            }
            m += pm;
            values.extend_from_slice(&p.values);
        }
        Self::new(vec![m, n], values)
    }
}

/// Layer-norm forward that also returns the normalised activations and the
/// per-row inverse standard deviations needed by the backward rule.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (m, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "layer_norm: feature width {d} vs gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let dn = T::of(d as f64);
    let mut out = Vec::with_capacity(m * d);
    let mut xhat = Vec::with_capacity(m * d);
    let mut inv_std = Vec::with_capacity(m);
    for row in x.values.chunks(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            xhat.push(h);
            out.push(gamma.values[j] * h + beta.values[j]);
        }
    }
    Ok((Tensor::new(vec![m, d], out)?, xhat, inv_std))
}
