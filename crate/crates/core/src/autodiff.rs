//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s together with
//! the forward value. [`Tape::gradient`] then walks the list backwards and
//! returns vector–Jacobian products for the requested input slots only;
//! nodes that do not depend on any requested slot are skipped.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{
    bmm_kernel, dims3, mm_at_kernel, mm_kernel, swap_outer_kernel, transpose_kernel, Tensor,
};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn graph(&self) -> u64 {
        self.graph
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f32),
    AddSuffix(usize, usize),
    Linear(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f32>,
    },
    Silu(usize),
    Reshape(usize),
    SwapOuter(usize),
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    Sum(usize),
    Row {
        table: usize,
        index: usize,
    },
    Substitute {
        base: usize,
        mask: Vec<bool>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddSuffix(a, b) => vec![*a, *b],
            Op::Linear(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::LayerNorm { x, .. }
            | Op::Silu(x)
            | Op::Reshape(x)
            | Op::SwapOuter(x)
            | Op::Slice { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::Row { table, .. } => vec![*table],
            Op::Substitute { base, .. } => vec![*base],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Which output to differentiate, with respect to which recorded slots.
#[derive(Debug, Clone)]
pub struct GradientRequest {
    pub graph: u64,
    pub output: Var,
    pub wrt: Vec<Var>,
    pub cotangent: Tensor,
}

impl GradientRequest {
    /// Gradient of a scalar output (cotangent 1).
    pub fn scalar(output: Var, wrt: Vec<Var>) -> Self {
        Self {
            graph: output.graph,
            output,
            wrt,
            cotangent: Tensor::scalar(1.0),
        }
    }
}

/// Vector–Jacobian products keyed by input slot.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_slot: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, slot: Var) -> Option<&Tensor> {
        self.by_slot.get(&slot)
    }

    pub fn take(&mut self, slot: Var) -> Option<Tensor> {
        self.by_slot.remove(&slot)
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var {
            graph: self.id,
            index,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::UnknownGraph(v.graph));
        }
        Ok(v.index)
    }

    fn get(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.get(ia).add(self.get(ib))?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.get(ia).sub(self.get(ib))?;
        Ok(self.push(v, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.get(ia).zip_map(self.get(ib), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.get(ia).scale(c);
        Ok(self.push(v, Op::Scale(ia, c)))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s; `b` is repeated over
    /// the leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.get(ia), self.get(ib));
        if !ta.shape().ends_with(tb.shape()) {
            return Err(Error::dim("add_broadcast", ta.shape(), tb.shape()));
        }
        let mut v = ta.clone();
        let n = tb.numel();
        for chunk in v.data_mut().chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddSuffix(ia, ib)))
    }

    /// `a[..., k] · w[k, n] -> [..., n]`.
    pub fn linear(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ia, iw) = (self.idx(a)?, self.idx(w)?);
        let (ta, tw) = (self.get(ia), self.get(iw));
        let (k, n) = match *tw.shape() {
            [k, n] if ta.shape().last() == Some(&k) => (k, n),
            _ => return Err(Error::dim("linear", ta.shape(), tw.shape())),
        };
        let rows = ta.numel() / k;
        let mut out = vec![0.0; rows * n];
        mm_kernel(ta.data(), tw.data(), &mut out, rows, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Linear(ia, iw)))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.get(ia).rank() != 2 {
            return Err(Error::dim(
                "matmul",
                self.get(ia).shape(),
                self.value(b).shape(),
            ));
        }
        self.linear(a, b)
    }

    /// Batched product `[p, m, k] x [p, k, n]`, or `[p, m, k] x [p, n, k]ᵀ`
    /// when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.get(ia), self.get(ib));
        let [p, m, k] = dims3(ta, "batch_matmul")?;
        let [p2, b1, b2] = dims3(tb, "batch_matmul")?;
        let (kb, n) = if transpose_b { (b2, b1) } else { (b1, b2) };
        if p != p2 || k != kb {
            return Err(Error::dim("batch_matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; p * m * n];
        bmm_kernel(ta.data(), tb.data(), &mut out, p, m, k, n, transpose_b);
        let v = Tensor::new(&[p, m, n], out)?;
        Ok(self.push(
            v,
            Op::BatchMatMul {
                a: ia,
                b: ib,
                transpose_b,
            },
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = crate::tensor::softmax_rows(self.get(ia));
        Ok(self.push(v, Op::Softmax(ia)))
    }

    /// Normalize the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Result<Var> {
        let ia = self.idx(a)?;
        let mut v = self.get(ia).clone();
        let n = *v.shape().last().unwrap();
        let mut inv_std = Vec::with_capacity(v.numel() / n);
        for row in v.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
            let r = 1.0 / libm::sqrtf(var + eps);
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        Ok(self.push(v, Op::LayerNorm { x: ia, inv_std }))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.get(ia).map(|x| x * sigmoid(x));
        Ok(self.push(v, Op::Silu(ia)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.get(ia).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(ia)))
    }

    /// Swap the two leading axes of a rank-3 value.
    pub fn swap_outer(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.get(ia).swap_outer()?;
        Ok(self.push(v, Op::SwapOuter(ia)))
    }

    pub fn concat_outer(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let v = {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| self.get(i)).collect();
            Tensor::concat_outer(&refs)?
        };
        Ok(self.push(v, Op::Concat(idx)))
    }

    pub fn slice_outer(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.get(ia).slice_outer(start, len)?;
        Ok(self.push(v, Op::Slice { x: ia, start }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = Tensor::scalar(self.get(ia).sum());
        Ok(self.push(v, Op::Sum(ia)))
    }

    /// Row `index` of a rank-2 table.
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let it = self.idx(table)?;
        let t = self.get(it);
        let (rows, cols) = match *t.shape() {
            [r, c] => (r, c),
            _ => {
                return Err(Error::Shape {
                    shape: t.shape().to_vec(),
                    reason: "row lookup expects a matrix",
                })
            }
        };
        if index >= rows {
            return Err(Error::Range {
                value: index,
                lo: 0,
                hi: rows - 1,
            });
        }
        let v = Tensor::new(&[cols], t.data()[index * cols..(index + 1) * cols].to_vec())?;
        Ok(self.push(v, Op::Row { table: it, index }))
    }

    /// Replace the entries selected by `mask` with `replacement`; the
    /// replaced entries carry no gradient back to `base`.
    pub fn substitute(&mut self, base: Var, replacement: &Tensor, mask: Vec<bool>) -> Result<Var> {
        let ib = self.idx(base)?;
        let tb = self.get(ib);
        if tb.shape() != replacement.shape() || mask.len() != tb.numel() {
            return Err(Error::dim("substitute", tb.shape(), replacement.shape()));
        }
        let mut v = tb.clone();
        for ((x, &r), &m) in v.data_mut().iter_mut().zip(replacement.data()).zip(&mask) {
            if m {
                *x = r;
            }
        }
        Ok(self.push(v, Op::Substitute { base: ib, mask }))
    }

    /// Vector–Jacobian products of `req.output` for each slot in `req.wrt`.
    pub fn gradient(&self, req: &GradientRequest) -> Result<Gradients> {
        if req.graph != self.id || req.output.graph != self.id {
            return Err(Error::UnknownGraph(req.graph));
        }
        let out = self.idx(req.output)?;
        if self.get(out).shape() != req.cotangent.shape() {
            return Err(Error::dim(
                "gradient cotangent",
                self.get(out).shape(),
                req.cotangent.shape(),
            ));
        }
        let wrt = req
            .wrt
            .iter()
            .map(|&w| self.idx(w))
            .collect::<Result<Vec<_>>>()?;

        let mut needed = vec![false; out + 1];
        for &w in &wrt {
            if w <= out {
                needed[w] = true;
            }
        }
        for i in 0..=out {
            if !needed[i] && self.nodes[i].op.inputs().iter().any(|&j| needed[j]) {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        if needed[out] {
            grads[out] = Some(req.cotangent.clone());
        }
        for i in (0..=out).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if wrt.contains(&i) {
                grads[i] = Some(g.clone());
            }
            self.backprop(i, &g, &needed, &mut grads)?;
        }

        let mut by_slot = BTreeMap::new();
        for (&w, &slot) in wrt.iter().zip(&req.wrt) {
            let g = grads
                .get(w)
                .cloned()
                .flatten()
                .unwrap_or_else(|| Tensor::zeros(self.get(w).shape()));
            by_slot.insert(slot, g);
        }
        Ok(Gradients { by_slot })
    }

    fn backprop(
        &self,
        i: usize,
        g: &Tensor,
        needed: &[bool],
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |j: usize, contribution: Tensor| -> Result<()> {
            if !needed[j] {
                return Ok(());
            }
            match &mut grads[j] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if needed[*a] {
                    send(*a, g.zip_map(self.get(*b), |x, y| x * y)?)?;
                }
                if needed[*b] {
                    send(*b, g.zip_map(self.get(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => send(*a, g.scale(*c))?,
            Op::AddSuffix(a, b) => {
                send(*a, g.clone())?;
                if needed[*b] {
                    let tb = self.get(*b);
                    let mut acc = Tensor::zeros(tb.shape());
                    for chunk in g.data().chunks(tb.numel()) {
                        for (x, &y) in acc.data_mut().iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                    send(*b, acc)?;
                }
            }
            Op::Linear(a, w) => {
                let (ta, tw) = (self.get(*a), self.get(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = ta.numel() / k;
                if needed[*a] {
                    let mut wt = vec![0.0; k * n];
                    transpose_kernel(tw.data(), &mut wt, k, n);
                    let mut ga = vec![0.0; rows * k];
                    mm_kernel(g.data(), &wt, &mut ga, rows, n, k);
                    send(*a, Tensor::new(ta.shape(), ga)?)?;
                }
                if needed[*w] {
                    let mut gw = vec![0.0; k * n];
                    mm_at_kernel(ta.data(), g.data(), &mut gw, rows, k, n);
                    send(*w, Tensor::new(tw.shape(), gw)?)?;
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (self.get(*a), self.get(*b));
                let [p, m, k] = dims3(ta, "batch_matmul")?;
                let n = if *transpose_b {
                    tb.shape()[1]
                } else {
                    tb.shape()[2]
                };
                if needed[*a] {
                    // gA = gC · Bᵀ (plain B when B was transposed in the forward).
                    let mut ga = vec![0.0; p * m * k];
                    bmm_kernel(g.data(), tb.data(), &mut ga, p, m, n, k, !*transpose_b);
                    send(*a, Tensor::new(ta.shape(), ga)?)?;
                }
                if needed[*b] {
                    let mut gb = vec![0.0; tb.numel()];
                    for q in 0..p {
                        let gq = &g.data()[q * m * n..(q + 1) * m * n];
                        let aq = &ta.data()[q * m * k..(q + 1) * m * k];
                        if *transpose_b {
                            mm_at_kernel(gq, aq, &mut gb[q * n * k..(q + 1) * n * k], m, n, k);
                        } else {
                            mm_at_kernel(aq, gq, &mut gb[q * k * n..(q + 1) * k * n], m, k, n);
                        }
                    }
                    send(*b, Tensor::new(tb.shape(), gb)?)?;
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                send(*a, gx)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut gx = g.clone();
                for ((grow, yrow), &r) in gx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(inv_std)
                {
                    let mean_g = grow.iter().sum::<f32>() / n as f32;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = r * (*gv - mean_g - yv * mean_gy);
                    }
                }
                send(*x, gx)?;
            }
            Op::Silu(a) => {
                let gx = g.zip_map(self.get(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                })?;
                send(*a, gx)?;
            }
            Op::Reshape(a) => send(*a, g.reshape(self.get(*a).shape())?)?,
            Op::SwapOuter(a) => {
                let [d0, d1, d2] = dims3(g, "swap_outer")?;
                let mut out = vec![0.0; g.numel()];
                swap_outer_kernel(g.data(), &mut out, d0, d1, d2);
                send(*a, Tensor::new(self.get(*a).shape(), out)?)?;
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.get(p).shape()[0];
                    if needed[p] {
                        send(p, g.slice_outer(start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::Slice { x, start } => {
                let tx = self.get(*x);
                let inner: usize = tx.shape()[1..].iter().product();
                let mut gx = Tensor::zeros(tx.shape());
                gx.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                send(*x, gx)?;
            }
            Op::Sum(a) => {
                let c = g.data()[0];
                send(*a, Tensor::full(self.get(*a).shape(), c))?;
            }
            Op::Row { table, index } => {
                let tt = self.get(*table);
                let cols = tt.shape()[1];
                let mut gt = Tensor::zeros(tt.shape());
                gt.data_mut()[index * cols..(index + 1) * cols].copy_from_slice(g.data());
                send(*table, gt)?;
            }
            Op::Substitute { base, mask } => {
                let mut gb = g.clone();
                for (v, &m) in gb.data_mut().iter_mut().zip(mask) {
                    if m {
                        *v = 0.0;
                    }
                }
                send(*base, gb)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}
