//! Minimal deterministic math kernel: a dense row-major matrix type, a
//! reverse-mode tape over a fixed op set, an AdamW optimizer with cosine
//! learning-rate decay and global-norm clipping, a finite-difference gradient
//! oracle, and a tiny checkpoint format (JSON header + little-endian `f32`
//! payload).
//!
//! The kernel is deliberately small: every op the models need is here, and
//! nothing else. Determinism is a hard requirement; identical seeds and
//! inputs produce bit-identical results on one platform, so there is no
//! threading and no architecture-dependent math inside the kernel.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;

pub use checkpoint::{
    file_hash, load_checkpoint, save_checkpoint, serialize_checkpoint, store_hash,
    CheckpointHeader, ParamEntry,
};
pub use gradcheck::{check_against_fd, directional_fd, fd_grad, GradCheckReport};
pub use optim::{clip_grad_norm, cosine_lr, AdamHyper, AdamW, BoundParams, GradMap, ParamStore};
pub use tape::{Grads, NodeId, Tape};

use crate::scalar::{sc, Scalar};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Errors produced by kernel operations. Shape failures carry the op name and
/// the tape position at which the op was recorded.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op} at node {node}: {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("backward from node {node} with shape {rows}x{cols}: loss must be 1x1 unless a seed gradient is supplied")]
    NonScalarLoss {
        node: usize,
        rows: usize,
        cols: usize,
    },
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("unknown parameter name {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix. Rank is fixed at two; vectors are `1 x n` rows and
/// scalars are `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Invalid {
                op: "from_vec",
                detail: format!("{} values for a {rows}x{cols} tensor", data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Row vector from an `f64` slice, casting into the kernel scalar.
    pub fn row_from_f64(vals: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: vals.len(),
            data: vals.iter().map(|&v| sc(v)).collect(),
        }
    }

    pub fn from_f64_vec(rows: usize, cols: usize, vals: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(rows, cols, vals.iter().map(|&v| sc(v)).collect())
    }

    /// Gaussian init with standard deviation `std`, drawn at `f64` from the
    /// caller's stream and cast into the kernel scalar.
    pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Self {
        let raw = crate::rng::normal_vec(rng, rows * cols);
        Tensor {
            rows,
            cols,
            data: raw.iter().map(|&v| sc(v * std)).collect(),
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of row `i` as a `1 x cols` tensor.
    pub fn row_tensor(&self, i: usize) -> Tensor<S> {
        Tensor {
            rows: 1,
            cols: self.cols,
            data: self.row(i).to_vec(),
        }
    }

    /// New tensor holding the listed rows, in the listed order.
    pub fn take_rows(&self, idx: &[usize]) -> Tensor<S> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// The contiguous column block `[start, start + len)` of every row.
    pub fn take_cols(&self, start: usize, len: usize) -> Result<Tensor<S>, TensorError> {
        if start + len > self.cols {
            return Err(TensorError::Invalid {
                op: "take_cols",
                detail: format!("columns {start}..{} of {}", start + len, self.cols),
            });
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Tensor {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    /// Stack tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor<S>]) -> Result<Self, TensorError> {
        let cols = parts
            .first()
            .map(|t| t.cols)
            .ok_or_else(|| TensorError::Invalid {
                op: "vstack",
                detail: "empty part list".into(),
            })?;
        let mut data = Vec::new();
        let mut rows = 0;
        for t in parts {
            if t.cols != cols {
                return Err(TensorError::Invalid {
                    op: "vstack",
                    detail: format!("column mismatch {} vs {cols}", t.cols),
                });
            }
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Re-type through `f64`. Exact when widening; rounds when narrowing.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&v| crate::scalar::sc(v.to_f64_c()))
                .collect(),
        }
    }

    /// Plain matrix product. The recording tape has its own kernel; this one
    /// serves frozen modules that never need gradients.
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::Invalid {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(), other.shape()),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Row-wise softmax with max subtraction, matching the tape op.
    pub fn softmax_rows(&self) -> Tensor<S> {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Row-wise layer normalization without affine parameters, using the
    /// same `var + EPS` denominator as the tape op.
    pub fn layernorm_rows(&self) -> Tensor<S> {
        let n = sc::<S>(self.cols as f64);
        let eps = sc::<S>(EPS);
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = out.row_mut(i);
            let mut mean = S::zero();
            for &v in row.iter() {
                mean += v;
            }
            mean /= n;
            let mut var = S::zero();
            for &v in row.iter() {
                let d = v - mean;
                var += d * d;
            }
            var /= n;
            let inv = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        out
    }

    /// Broadcast-add a `1 x n` row onto every row.
    pub fn add_row_broadcast(&self, row: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(TensorError::Invalid {
                op: "add_row_broadcast",
                detail: format!("{:?} + {:?}", self.shape(), row.shape()),
            });
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Horizontal concatenation of equal-height tensors.
    pub fn hstack(parts: &[&Tensor<S>]) -> Result<Self, TensorError> {
        let rows = parts
            .first()
            .map(|t| t.rows)
            .ok_or_else(|| TensorError::Invalid {
                op: "hstack",
                detail: "empty part list".into(),
            })?;
        if parts.iter().any(|t| t.rows != rows) {
            return Err(TensorError::Invalid {
                op: "hstack",
                detail: "row-count mismatch".into(),
            });
        }
        let cols = parts.iter().map(|t| t.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for t in parts {
                out.row_mut(i)[at..at + t.cols].copy_from_slice(t.row(i));
                at += t.cols;
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn sub(&self, other: &Tensor<S>) -> Tensor<S> {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.map(|v| v * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Frobenius norm, accumulated at `f64`.
    pub fn sq_norm_f64(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_c() * v.to_f64_c()).sum()
    }

    /// Values as `f64`, row-major.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_c()).collect()
    }

    /// Values as `f32`, row-major; the storage precision of checkpoints and
    /// datasets.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f64_c() as f32).collect()
    }

    pub fn from_f32_vec(rows: usize, cols: usize, vals: &[f32]) -> Result<Self, TensorError> {
        Self::from_vec(rows, cols, vals.iter().map(|&v| sc(v as f64)).collect())
    }

    /// Round-trip through `f32`. Collection paths canonicalize tensors this
    /// way so in-process runs match runs staged through files bit for bit.
    pub fn quantize_f32(&self) -> Tensor<S> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| sc((v.to_f64_c() as f32) as f64))
                .collect(),
        }
    }
}

/// Cosine between two equal-length slices, accumulated at `f64` with the
/// kernel's guarded denominator `max(|a| * |b|, 1e-8)`.
pub fn cosine_f64<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64_c(), y.to_f64_c());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt()).max(crate::tensorkit::EPS)
}

/// Norm guard shared by layer normalization and cosine denominators.
pub const EPS: f64 = 1e-8;
