//! Dense row-major `f64` tensors.
//!
//! This is deliberately small: shapes are `Vec<usize>`, data is a flat
//! buffer, the batch axis is always axis 0, and values are immutable once
//! built (ops return new tensors). Shape violations are programmer errors
//! and panic with a descriptive message; numeric validity (no NaN/Inf) is
//! enforced at the boundaries that can actually produce it (losses,
//! gradients, the optimizer) via [`Tensor::assert_finite`].
//!
//! `matmul` accumulates strictly in ascending-k order for every output
//! element, so its results are bit-identical to a naive triple loop while
//! the k-panel blocking keeps the hot loop in cache.

use crate::mathx;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Dense n-dimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match data length {}", data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Scalar tensor (shape `[]`, one element).
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn to_scalar(&self) -> f64 {
        assert!(self.is_scalar(), "expected scalar, got shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows when viewed as `[batch, ...]`; scalars have one row.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[0]
        }
    }

    /// Elements per row when viewed as `[batch, ...]`.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    fn assert_same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(self.shape, other.shape, "{op}: shape mismatch {:?} vs {:?}", self.shape, other.shape);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        self.assert_same_shape(other, "zip");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| c * x)
    }

    /// `self + c * other`, the fused update used all over the optimizer.
    pub fn add_scaled(&self, other: &Tensor, c: f64) -> Tensor {
        self.zip(other, |a, b| a + c * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        assert!(!self.data.is_empty(), "mean of empty tensor");
        self.sum() / self.data.len() as f64
    }

    /// Squared Euclidean norm over all entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Broadcast add of a `[d]` vector over the leading batch axis of `[b, d]`.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let d = self.row_len();
        assert_eq!(bias.len(), d, "add_bias: bias length {} vs row length {d}", bias.len());
        let mut out = self.clone();
        for i in 0..self.rows() {
            let row = &mut out.data[i * d..(i + 1) * d];
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        out
    }

    /// Scales each row of `[b, d]` by the matching entry of `[b]`.
    pub fn scale_rows(&self, scales: &Tensor) -> Tensor {
        let b = self.rows();
        assert_eq!(scales.len(), b, "scale_rows: {} scales for {b} rows", scales.len());
        let d = self.row_len();
        let mut out = self.clone();
        for i in 0..b {
            let s = scales.data[i];
            for v in &mut out.data[i * d..(i + 1) * d] {
                *v *= s;
            }
        }
        out
    }

    /// Per-row sum: `[b, d] -> [b]`.
    pub fn sum_last(&self) -> Tensor {
        let b = self.rows();
        let d = self.row_len();
        let data = (0..b).map(|i| self.data[i * d..(i + 1) * d].iter().sum()).collect();
        Tensor { shape: vec![b], data }
    }

    /// Per-row squared norm: `[b, d] -> [b]`.
    pub fn sq_norm_rows(&self) -> Tensor {
        let b = self.rows();
        let d = self.row_len();
        let data = (0..b)
            .map(|i| self.data[i * d..(i + 1) * d].iter().map(|x| x * x).sum())
            .collect();
        Tensor { shape: vec![b], data }
    }

    /// Concatenation along the last axis of 2-D tensors with equal row counts.
    pub fn concat_last(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_last: no inputs");
        let b = parts[0].rows();
        for p in parts {
            assert_eq!(p.rows(), b, "concat_last: row count mismatch");
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(b * total);
        for i in 0..b {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Tensor { shape: vec![b, total], data }
    }

    /// Rows `lo..hi` of a batched tensor.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        assert!(lo <= hi && hi <= self.rows(), "slice_rows: {lo}..{hi} out of {} rows", self.rows());
        let d = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Tensor { shape, data: self.data[lo * d..hi * d].to_vec() }
    }

    /// Columns `lo..hi` of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        assert_eq!(self.shape.len(), 2, "slice_cols expects 2-D, got {:?}", self.shape);
        let (b, d) = (self.shape[0], self.shape[1]);
        assert!(lo <= hi && hi <= d, "slice_cols: {lo}..{hi} out of {d}");
        let w = hi - lo;
        let mut data = Vec::with_capacity(b * w);
        for i in 0..b {
            data.extend_from_slice(&self.data[i * d + lo..i * d + hi]);
        }
        Tensor { shape: vec![b, w], data }
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2, "transpose expects 2-D, got {:?}", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data }
    }

    /// Matrix product `[m, k] x [k, n] -> [m, n]`.
    ///
    /// Accumulation for each output element runs over k in ascending order
    /// with plain multiply-then-add (no FMA), so results match a naive
    /// triple loop exactly in f64. Register tiles and k-panels only change
    /// the memory access pattern, not the summation order.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matmul lhs must be 2-D, got {:?}", self.shape);
        assert_eq!(other.shape.len(), 2, "matmul rhs must be 2-D, got {:?}", other.shape);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul: inner extents {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor { shape: vec![m, n], data: out }
    }

    /// Returns an error naming the first non-finite entry, if any.
    pub fn check_finite(&self, what: &str) -> Result<(), String> {
        for (i, &x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(format!("{what}: non-finite value {x} at flat index {i}"));
            }
        }
        Ok(())
    }

    pub fn assert_finite(&self, what: &str) {
        if let Err(msg) = self.check_finite(what) {
            panic!("{msg}");
        }
    }

    /// Elementwise SiLU `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        self.map(|x| x * mathx::sigmoid(x))
    }

    /// Derivative of SiLU: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
    pub fn silu_grad(&self) -> Tensor {
        self.map(|x| {
            let s = mathx::sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }
}

/// Blocked kernel behind [`Tensor::matmul`]. An 8x16 accumulator tile sits
/// in registers while k runs over cache-sized panels; partial sums round-trip
/// through the output buffer between panels, which is lossless in f64 and
/// keeps per-element accumulation in ascending-k order.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 8;
    const NR: usize = 16;
    const KC: usize = 64;
    let mut kp = 0;
    while kp < k {
        let kend = core::cmp::min(kp + KC, k);
        let mut ib = 0;
        while ib < m {
            let mend = core::cmp::min(ib + MR, m);
            let mut jb = 0;
            while jb < n {
                let nend = core::cmp::min(jb + NR, n);
                if mend - ib == MR && nend - jb == NR {
                    let mut acc = [[0.0f64; NR]; MR];
                    for (i, row) in acc.iter_mut().enumerate() {
                        row.copy_from_slice(&c[(ib + i) * n + jb..(ib + i) * n + jb + NR]);
                    }
                    for kk in kp..kend {
                        let brow = &b[kk * n + jb..kk * n + jb + NR];
                        for (i, row) in acc.iter_mut().enumerate() {
                            let av = a[(ib + i) * k + kk];
                            for (j, acc_v) in row.iter_mut().enumerate() {
                                *acc_v += av * brow[j];
                            }
                        }
                    }
                    for (i, row) in acc.iter().enumerate() {
                        c[(ib + i) * n + jb..(ib + i) * n + jb + NR].copy_from_slice(row);
                    }
                } else {
                    // Edge tile: plain loops, same k order.
                    for i in ib..mend {
                        for kk in kp..kend {
                            let av = a[i * k + kk];
                            for j in jb..nend {
                                c[i * n + j] += av * b[kk * n + j];
                            }
                        }
                    }
                }
                jb = nend;
            }
            ib = mend;
        }
        kp = kend;
    }
}
