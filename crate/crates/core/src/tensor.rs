//! Dense row-major float64 tensors and named parameter storage.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model function is not deterministic: {0} vs {1}")]
    NonDeterministic(f64, f64),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Like [`Tensor::new`] but additionally rejects NaN/Inf.
    pub fn finite(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "finite" });
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform(-bound, bound) entries.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> TensorResult<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Plain (non-recording) 2-D matrix product; leading axes of `self` are flattened.
    pub fn matmul(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        let (rows, inner) = split_last(&self.shape);
        if rhs.shape.len() != 2 || rhs.shape[0] != inner {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let cols = rhs.shape[1];
        let mut out = vec![0.0; rows * cols];
        matmul_into(&self.data, &rhs.data, &mut out, rows, inner, cols);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = cols;
        Ok(Tensor { shape, data: out })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Splits a shape into (product of leading axes, last axis).
pub(crate) fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let lead = shape[..shape.len().saturating_sub(1)].iter().product();
    (lead, last)
}

/// out[rows×cols] = a[rows×inner] · b[inner×cols]
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx") {
        // SAFETY: the feature was just detected. Same operation order as the fallback, so
        // results are bit-identical with or without AVX.
        unsafe { matmul_avx(a, b, out, rows, inner, cols) };
        return;
    }
    matmul_kernel(a, b, out, rows, inner, cols);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn matmul_avx(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    matmul_kernel(a, b, out, rows, inner, cols);
}

#[inline(always)]
fn matmul_kernel(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    // four rows of `b` per pass so each output row is loaded and stored a quarter as often
    let quads = inner / 4 * 4;
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        let a_row = &a[i * inner..(i + 1) * inner];
        for k in (0..quads).step_by(4) {
            let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
            let b0 = &b[k * cols..(k + 1) * cols];
            let b1 = &b[(k + 1) * cols..(k + 2) * cols];
            let b2 = &b[(k + 2) * cols..(k + 3) * cols];
            let b3 = &b[(k + 3) * cols..(k + 4) * cols];
            for ((((o, x0), x1), x2), x3) in out_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *o += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
        }
        for k in quads..inner {
            let aik = a_row[k];
            let b_row = &b[k * cols..(k + 1) * cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// Row-major transpose of a `rows × cols` matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Dotted path naming one parameter matrix, e.g. `vision.block0.w1`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        ParamId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        ParamId(s.to_string())
    }
}

/// Ordered map of named parameters. Iteration order is the id order, which keeps every
/// traversal (optimizer, Fisher, checkpoint) deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<ParamId, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, value: Tensor) -> Option<Tensor> {
        self.params.insert(id, value)
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.params.get(id)
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Option<&mut Tensor> {
        self.params.get_mut(id)
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.params.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into `self`, replacing existing ids.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (id, t) in other.iter() {
            self.params.insert(id.clone(), t.clone());
        }
    }

    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a ParamId>) -> ParamStore {
        let mut out = ParamStore::new();
        for id in ids {
            if let Some(t) = self.params.get(id) {
                out.params.insert(id.clone(), t.clone());
            }
        }
        out
    }

    /// Bitwise equality on every shared id and identical id sets.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(other.params.iter())
                .all(|((ia, ta), (ib, tb))| ia == ib && ta.shape == tb.shape && ta.data.iter().zip(&tb.data).all(|(a, b)| a.to_bits() == b.to_bits()))
    }
}

impl FromIterator<(ParamId, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (ParamId, Tensor)>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}
