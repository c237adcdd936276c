//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends one node whose inputs already exist on the tape, so
//! the node order is a topological order and backward is a single reverse sweep.
//! Parameter leaves borrow their data from a [`ParamStore`]; constants own theirs.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{numel, ParamGrads, ParamId, ParamStore, Result, Tensor, TensorError};

/// Sentinel used in additive attention masks.
pub const MASKED: f32 = f32::NEG_INFINITY;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { lhs: Var, rhs: Var, transpose_rhs: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Dropout { input: Var, mask: Vec<f32> },
    Embedding { table: Var, indices: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { input: Var, start: usize, end: usize },
    Reshape(Var),
    Permute0213 { input: Var, dims: [usize; 4] },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm { input: Var, gain: Var, bias: Var, normed: Vec<f32>, rstd: Vec<f32> },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    data: Cow<'a, [f32]>,
    op: Op,
    tracked: bool,
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data: Cow::Owned(data), op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).data
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.data.to_vec()).expect("node shape is consistent")
    }

    /// Records a constant leaf; it never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    /// Records a parameter leaf borrowing its values from `store`.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Cow::Borrowed(t.data()),
            op: Op::Param(id),
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `[m×k] · [k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    /// Batched product over the leading dimension: `[b×m×k] · [b×k×n]`, or
    /// `[b×m×k] · [b×n×k]ᵀ` when `transpose_rhs` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_rhs: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_rhs { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(mismatch("batch_matmul", sa, sb));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs { sb[1] } else { sb[2] };
        let mut out = vec![0.0; bt * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bt {
            let ai = &va[i * m * k..(i + 1) * m * k];
            let bi = &vb[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_rhs {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        let tracked = self.node(a).tracked || self.node(b).tracked;
        Ok(self.push(
            vec![bt, m, n],
            out,
            Op::BatchMatMul { lhs: a, rhs: b, transpose_rhs },
            tracked,
        ))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.node(a).tracked || self.node(b).tracked;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector along the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n || n == 0 {
            return Err(mismatch("add_bias", sx, sb));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, c)| r + c))
            .collect();
        let tracked = self.node(x).tracked || self.node(bias).tracked;
        let shape = sx.to_vec();
        Ok(self.push(shape, out, Op::AddBias(x, bias), tracked))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.node(x).tracked;
        Ok(self.push(shape, out, Op::Scale(x, s), tracked))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.node(x).tracked;
        Ok(self.push(shape, out, Op::Relu(x), tracked))
    }

    /// Inverted dropout. Identity (no node recorded) when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.random::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.node(x).tracked;
        Ok(self.push(shape, out, Op::Dropout { input: x, mask }, tracked))
    }

    /// Gathers rows of a `[rows×d]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table)?;
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(TensorError::Rank { op: "embedding", expected: 2, shape: st.to_vec() });
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, rows });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let tracked = self.node(table).tracked;
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Embedding { table, indices: indices.to_vec() },
            tracked,
        ))
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::EmptyDim { op: "concat" })?;
        self.check(first)?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        let mut tracked = false;
        for &p in parts {
            self.check(p)?;
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
            tracked |= self.node(p).tracked;
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Keeps columns `start..end` of the last dimension.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        let n = *s.last().ok_or(TensorError::EmptyDim { op: "slice" })?;
        if start >= end || end > n {
            return Err(mismatch("slice", s, &[start, end]));
        }
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = end - start;
        let tracked = self.node(x).tracked;
        Ok(self.push(shape, out, Op::SliceCols { input: x, start, end }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        if numel(shape) != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let tracked = self.node(x).tracked;
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), tracked))
    }

    /// Swaps the two middle axes of a rank-4 tensor: `[a,b,c,d] -> [a,c,b,d]`.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(TensorError::Rank { op: "permute", expected: 4, shape: s.to_vec() });
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = permute_0213(self.value(x), dims);
        let tracked = self.node(x).tracked;
        Ok(self.push(
            vec![dims[0], dims[2], dims[1], dims[3]],
            out,
            Op::Permute0213 { input: x, dims },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: f32 = self.value(x).iter().sum();
        let tracked = self.node(x).tracked;
        Ok(self.push(Vec::new(), vec![s], Op::Sum(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if v.is_empty() {
            return Err(TensorError::EmptyDim { op: "mean" });
        }
        let m = v.iter().sum::<f32>() / v.len() as f32;
        let tracked = self.node(x).tracked;
        Ok(self.push(Vec::new(), vec![m], Op::Mean(x), tracked))
    }

    /// Softmax over the last dimension with an optional additive mask.
    ///
    /// `mask` has shape `[rows_per_block × cols]` and is applied cyclically over
    /// the rows of `x`; entries are `0.0` or [`MASKED`].
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        let n = *s.last().unwrap_or(&0);
        if n == 0 {
            return Err(TensorError::EmptyDim { op: "softmax" });
        }
        if let Some(m) = mask {
            let ms = m.shape();
            if ms.len() != 2 || ms[1] != n || ms[0] == 0 || !(self.value(x).len() / n).is_multiple_of(ms[0]) {
                return Err(mismatch("softmax mask", s, ms));
            }
        }
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            if let Some(m) = mask {
                let mr = r % m.shape()[0];
                for (v, a) in row.iter_mut().zip(&m.data()[mr * n..(mr + 1) * n]) {
                    *v += a;
                }
            }
            if row.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
                return Err(TensorError::NonFinite { op: "softmax" });
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                let masked = mask.is_some_and(|m| {
                    let mr = r % m.shape()[0];
                    m.data()[mr * n..(mr + 1) * n].iter().all(|&a| a == MASKED)
                });
                return Err(if masked {
                    TensorError::FullyMasked { row: r }
                } else {
                    TensorError::NonFinite { op: "softmax" }
                });
            }
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = libm::expf(*v - max);
                z += *v;
            }
            let inv = 1.0 / z;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = s.to_vec();
        let tracked = self.node(x).tracked;
        Ok(self.push(shape, out, Op::Softmax(x), tracked))
    }

    /// Normalizes each row of the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let s = self.shape(x);
        let n = *s.last().unwrap_or(&0);
        if n == 0 {
            return Err(TensorError::EmptyDim { op: "layer_norm" });
        }
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(mismatch("layer_norm", s, self.shape(gain)));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = self.value(x).len() / n;
        let mut normed = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for (r, row) in self.value(x).chunks_exact(n).enumerate() {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / libm::sqrtf(var + eps);
            rstd[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normed[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = s.to_vec();
        let tracked = self.node(x).tracked || self.node(gain).tracked || self.node(bias).tracked;
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm { input: x, gain, bias, normed, rstd },
            tracked,
        ))
    }

    /// Back-propagates from a scalar `loss`, returning parameter gradients.
    ///
    /// The tape is cleared afterwards; a second call fails until a new forward
    /// pass has been recorded.
    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads> {
        if self.nodes.is_empty() {
            return Err(TensorError::TapeConsumed);
        }
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = ParamGrads::default();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.backprop_node(node, dy, &mut grads, &mut out);
        }

        self.nodes.clear();
        // merge duplicate bindings of the same parameter
        out.entries.sort_by_key(|(id, _)| *id);
        let mut merged: Vec<(ParamId, Vec<f32>)> = Vec::with_capacity(out.entries.len());
        for (id, g) in out.entries {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                _ => merged.push((id, g)),
            }
        }
        Ok(ParamGrads { entries: merged })
    }

    fn backprop_node(
        &self,
        node: &Node<'a>,
        dy: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        out: &mut ParamGrads,
    ) {
        let nodes = &self.nodes;
        let tracked = |v: Var| nodes[v.0].tracked;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.entries.push((*id, dy)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if tracked(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm_nt(&dy, &nodes[b.0].data, ga, m, n, k);
                }
                if tracked(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm_tn(&nodes[a.0].data, &dy, gb, m, k, n);
                }
            }
            Op::BatchMatMul { lhs, rhs, transpose_rhs } => {
                let (sa, sb) = (&nodes[lhs.0].shape, &nodes[rhs.0].shape);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *transpose_rhs { sb[1] } else { sb[2] };
                let (va, vb) = (&nodes[lhs.0].data, &nodes[rhs.0].data);
                if tracked(*lhs) {
                    let ga = slot(grads, *lhs, bt * m * k);
                    for i in 0..bt {
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let bi = &vb[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *transpose_rhs {
                            gemm_nn(dyi, bi, gai, m, n, k);
                        } else {
                            gemm_nt(dyi, bi, gai, m, n, k);
                        }
                    }
                }
                if tracked(*rhs) {
                    let gb = slot(grads, *rhs, bt * k * n);
                    for i in 0..bt {
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let ai = &va[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_rhs {
                            // d(B) [n×k] = dYᵀ [n×m] · A [m×k]
                            gemm_tn(dyi, ai, gbi, m, n, k);
                        } else {
                            gemm_tn(ai, dyi, gbi, m, k, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        add_into(slot(grads, v, dy.len()), &dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if tracked(*a) {
                    add_into(slot(grads, *a, dy.len()), &dy);
                }
                if tracked(*b) {
                    let g = slot(grads, *b, dy.len());
                    g.iter_mut().zip(&dy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let vb = &nodes[b.0].data;
                    let g = slot(grads, *a, dy.len());
                    for ((g, d), y) in g.iter_mut().zip(&dy).zip(vb.iter()) {
                        *g += d * y;
                    }
                }
                if tracked(*b) {
                    let va = &nodes[a.0].data;
                    let g = slot(grads, *b, dy.len());
                    for ((g, d), x) in g.iter_mut().zip(&dy).zip(va.iter()) {
                        *g += d * x;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if tracked(*x) {
                    add_into(slot(grads, *x, dy.len()), &dy);
                }
                if tracked(*b) {
                    let n = nodes[b.0].shape[0];
                    let g = slot(grads, *b, n);
                    for row in dy.chunks_exact(n) {
                        add_into(g, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if tracked(*x) {
                    let g = slot(grads, *x, dy.len());
                    g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::Relu(x) => {
                if tracked(*x) {
                    let g = slot(grads, *x, dy.len());
                    for ((g, d), y) in g.iter_mut().zip(&dy).zip(node.data.iter()) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if tracked(*input) {
                    let g = slot(grads, *input, dy.len());
                    for ((g, d), m) in g.iter_mut().zip(&dy).zip(mask) {
                        *g += d * m;
                    }
                }
            }
            Op::Embedding { table, indices } => {
                if tracked(*table) {
                    let d = nodes[table.0].shape[1];
                    let g = slot(grads, *table, nodes[table.0].data.len());
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].data.len();
                    if tracked(p) {
                        add_into(slot(grads, p, len), &dy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols { input, start, end } => {
                if tracked(*input) {
                    let n = *nodes[input.0].shape.last().unwrap();
                    let w = end - start;
                    let g = slot(grads, *input, nodes[input.0].data.len());
                    for (grow, drow) in g.chunks_exact_mut(n).zip(dy.chunks_exact(w)) {
                        add_into(&mut grow[*start..*end], drow);
                    }
                }
            }
            Op::Reshape(x) => {
                if tracked(*x) {
                    add_into(slot(grads, *x, dy.len()), &dy);
                }
            }
            Op::Permute0213 { input, dims } => {
                if tracked(*input) {
                    let back = permute_0213(&dy, [dims[0], dims[2], dims[1], dims[3]]);
                    add_into(slot(grads, *input, dy.len()), &back);
                }
            }
            Op::Sum(x) => {
                if tracked(*x) {
                    let len = nodes[x.0].data.len();
                    let g = slot(grads, *x, len);
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean(x) => {
                if tracked(*x) {
                    let len = nodes[x.0].data.len();
                    let d = dy[0] / len as f32;
                    let g = slot(grads, *x, len);
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::Softmax(x) => {
                if tracked(*x) {
                    let n = *node.shape.last().unwrap();
                    let g = slot(grads, *x, dy.len());
                    for ((grow, drow), yrow) in g
                        .chunks_exact_mut(n)
                        .zip(dy.chunks_exact(n))
                        .zip(node.data.chunks_exact(n))
                    {
                        let dotp: f32 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += y * (d - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { input, gain, bias, normed, rstd } => {
                let n = *node.shape.last().unwrap();
                if tracked(*gain) {
                    let g = slot(grads, *gain, n);
                    for (drow, hrow) in dy.chunks_exact(n).zip(normed.chunks_exact(n)) {
                        for j in 0..n {
                            g[j] += drow[j] * hrow[j];
                        }
                    }
                }
                if tracked(*bias) {
                    let g = slot(grads, *bias, n);
                    for drow in dy.chunks_exact(n) {
                        add_into(g, drow);
                    }
                }
                if tracked(*input) {
                    let gv = &nodes[gain.0].data;
                    let g = slot(grads, *input, dy.len());
                    let inv_n = 1.0 / n as f32;
                    for (r, ((grow, drow), hrow)) in g
                        .chunks_exact_mut(n)
                        .zip(dy.chunks_exact(n))
                        .zip(normed.chunks_exact(n))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = drow[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hrow[j];
                        }
                        for j in 0..n {
                            let dh = drow[j] * gv[j];
                            grow[j] += rstd[r] * (dh - inv_n * sum_dh - hrow[j] * inv_n * sum_dh_h);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn permute_0213(src: &[f32], [a, b, c, d]: [usize; 4]) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}
