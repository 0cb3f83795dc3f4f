//! Dense row-major `f32` tensors and the eager kernels shared by the
//! recorded graph in [`crate::autodiff`].
//!
//! Every reduction accumulates in ascending index order, so results are
//! bitwise reproducible on one platform.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                reason: "extents must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "extents must be positive: {shape:?}"
        );
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Sub-tensor `[start, start + len)` along the leading axis.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Self> {
        let outer = self.shape[0];
        if len == 0 || start + len > outer {
            return Err(Error::Range {
                value: start + len,
                lo: 1,
                hi: outer,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::new(
            &shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat_outer(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Shape {
            shape: Vec::new(),
            reason: "concat of zero tensors",
        })?;
        let mut outer = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::dim("concat_outer", &first.shape, &p.shape));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Self::new(&shape, data)
    }

    /// Repeat along the leading axis `times` times.
    pub fn tile_outer(&self, times: usize) -> Result<Self> {
        let parts: Vec<&Tensor> = (0..times).map(|_| self).collect();
        Self::concat_outer(&parts)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// `max |self - other|`.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Swap the two leading axes of a rank-3 tensor.
    pub fn swap_outer(&self) -> Result<Self> {
        let [a, b, c] = dims3(self, "swap_outer")?;
        let mut out = vec![0.0; self.numel()];
        swap_outer_kernel(&self.data, &mut out, a, b, c);
        Self::new(&[b, a, c], out)
    }

    /// Transpose a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                shape: self.shape.clone(),
                reason: "transpose expects a matrix",
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        transpose_kernel(&self.data, &mut out, m, n);
        Self::new(&[n, m], out)
    }
}

pub(crate) fn dims3(t: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Shape {
            shape: t.shape().to_vec(),
            reason: match op {
                "swap_outer" => "swap_outer expects rank 3",
                _ => "expected a rank-3 tensor",
            },
        }),
    }
}

/// Matrix product. Each output element sums over the inner index in
/// ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => {
            let mut out = vec![0.0; m * n];
            mm_kernel(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(&[m, n], out)
        }
        _ => Err(Error::dim("matmul", a.shape(), b.shape())),
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(s: &Tensor) -> Tensor {
    let n = *s.shape().last().expect("tensor rank >= 1");
    let mut out = s.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

/// `q · kᵀ / √d` per batch entry: `[b, m, d] x [b, n, d] -> [b, m, n]`.
pub fn scaled_attention_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let [b, m, d] = dims3(q, "scaled_attention_scores")?;
    let [b2, n, d2] = dims3(k, "scaled_attention_scores")?;
    if b != b2 || d != d2 {
        return Err(Error::dim("scaled_attention_scores", q.shape(), k.shape()));
    }
    let mut out = vec![0.0; b * m * n];
    bmm_kernel(q.data(), k.data(), &mut out, b, m, d, n, true);
    let inv = 1.0 / libm::sqrtf(d as f32);
    for v in &mut out {
        *v *= inv;
    }
    Tensor::new(&[b, m, n], out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `out += a[m×k] · b[k×n]`.
///
/// Each output row is accumulated in 16-column register blocks over the
/// whole `k` range before being added to `out`.
pub(crate) fn mm_kernel(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    const W: usize = 16;
    let full = n - n % W;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut j0 = 0;
        while j0 < full {
            let mut acc = [0.0f32; W];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow: &[f32; W] = b[kk * n + j0..kk * n + j0 + W].try_into().expect("block");
                for t in 0..W {
                    acc[t] += aik * brow[t];
                }
            }
            for (o, v) in orow[j0..j0 + W].iter_mut().zip(acc) {
                *o += v;
            }
            j0 += W;
        }
        if full < n {
            let tail = &mut orow[full..];
            for (kk, &aik) in arow.iter().enumerate() {
                for (o, &bv) in tail.iter_mut().zip(&b[kk * n + full..(kk + 1) * n]) {
                    *o += aik * bv;
                }
            }
        }
    }
}

/// `out += aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `[k×n]`.
pub(crate) fn mm_at_kernel(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub(crate) fn transpose_kernel(a: &[f32], out: &mut [f32], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

pub(crate) fn swap_outer_kernel(a: &[f32], out: &mut [f32], d0: usize, d1: usize, d2: usize) {
    for i in 0..d0 {
        for j in 0..d1 {
            let src = (i * d1 + j) * d2;
            let dst = (j * d0 + i) * d2;
            out[dst..dst + d2].copy_from_slice(&a[src..src + d2]);
        }
    }
}

/// Batched product. With `transpose_b`, `b` is `[batch, n, k]` and the
/// result is `a · bᵀ`; otherwise `b` is `[batch, k, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm_kernel(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) {
    let mut bt = if transpose_b {
        vec![0.0; k * n]
    } else {
        Vec::new()
    };
    for p in 0..batch {
        let ap = &a[p * m * k..(p + 1) * m * k];
        let bp = &b[p * k * n..(p + 1) * k * n];
        let op = &mut out[p * m * n..(p + 1) * m * n];
        if transpose_b {
            transpose_kernel(bp, &mut bt, n, k);
            mm_kernel(ap, &bt, op, m, k, n);
        } else {
            mm_kernel(ap, bp, op, m, k, n);
        }
    }
}
