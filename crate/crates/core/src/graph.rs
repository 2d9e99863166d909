//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op checks its output for NaN/Inf and fails immediately. Nodes are
//! appended in evaluation order, so a reverse sweep over node ids is a valid
//! topological traversal.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{check_finite, strides_of, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_a: bool, trans_b: bool },
    AddSuffix { x: Var, y: Var },
    MulSuffix { x: Var, y: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, factor: S },
    MulConst { x: Var, factor: Arc<Vec<S>> },
    Relu(Var),
    Sqrt(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    GatherRows { x: Var, index: Arc<Vec<usize>>, width: usize },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    SumAll(Var),
    MeanAll(Var),
    MaskedSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    Normalize { x: Var, width: usize, across_rows: bool, inv_std: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased per-channel variance of the batch.
    pub var: Vec<S>,
}

/// Records operations and replays them backwards.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    named: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<S>> {
        self.named
    }
}

fn suffix_compatible(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: &[usize], data: Vec<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::new(shape, data)?, op, requires_grad))
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        check_finite("constant", value.data())?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<Var> {
        check_finite("param", value.data())?;
        let var = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), var));
        Ok(var)
    }

    /// Batched product of rank-3 operands. With `trans_a`, `a` is stored as
    /// `[batch, k, m]`; with `trans_b`, `b` is stored as `[batch, n, k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err("bmm", format!("inner extents {k} and {k2} differ")));
        }
        let batch = sa[0];
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                S::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    trans_a,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.emit("bmm", &[batch, m, n], out, Op::Bmm { a, b, batch, m, k, n, trans_a, trans_b }, &[a, b])
    }

    /// Matrix product of rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s (bias, positional codes).
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if !suffix_compatible(&sx, &sy) {
            return Err(shape_err("add_suffix", format!("{sy:?} is not a suffix of {sx:?}")));
        }
        let yv = self.value(y).data();
        let w = yv.len();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks_exact(w.max(1)) {
            out.extend(row.iter().zip(yv).map(|(&a, &b)| a + b));
        }
        self.emit("add_suffix", &sx, out, Op::AddSuffix { x, y }, &[x, y])
    }

    /// `x * y` where `y`'s shape is a trailing suffix of `x`'s.
    pub fn mul_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if !suffix_compatible(&sx, &sy) {
            return Err(shape_err("mul_suffix", format!("{sy:?} is not a suffix of {sx:?}")));
        }
        let yv = self.value(y).data();
        let w = yv.len();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks_exact(w.max(1)) {
            out.extend(row.iter().zip(yv).map(|(&a, &b)| a * b));
        }
        self.emit("mul_suffix", &sx, out, Op::MulSuffix { x, y }, &[x, y])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(shape_err(name, format!("{sa:?} vs {sb:?}")));
        }
        let out: Vec<S> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        self.emit(name, &sa, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.emit("scale", &shape, out, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise product with a constant of identical length (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<S>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(shape_err("mul_const", format!("{} factors for {:?}", factor.len(), self.shape(x))));
        }
        let out: Vec<S> = self.value(x).data().iter().zip(&factor).map(|(&v, &f)| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.emit("mul_const", &shape, out, Op::MulConst { x, factor: Arc::new(factor) }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v.max(S::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.emit("relu", &shape, out, Op::Relu(x), &[x])
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        self.emit("sqrt", &shape, out, Op::Sqrt(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for rank {}", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        self.emit("permute", &out_shape, out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// Selects slices along the first axis; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        if index.is_empty() {
            return Err(shape_err("gather_rows", "empty index"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * width);
        for &r in index.iter() {
            out.extend_from_slice(&xv[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = index.len();
        self.emit("gather_rows", &out_shape, out, Op::GatherRows { x, index, width }, &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.emit("concat", &shape, out, Op::Concat { parts: parts.to_vec(), widths }, parts)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(shape_err("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = Self::axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.emit("sum_axis", &out_shape, out, Op::SumAxis { x, outer, len, inner }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.emit("sum_all", &[1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: S = v.data().iter().copied().sum::<S>() / S::of(v.len() as f64);
        self.emit("mean_all", &[1], vec![s], Op::MeanAll(x), &[x])
    }

    /// Softmax along `axis` restricted to entries where `keep` is true.
    /// Dropped entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool], axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("masked_softmax", format!("axis {axis} for {shape:?}")));
        }
        if keep.len() != self.value(x).len() {
            return Err(shape_err("masked_softmax", format!("mask of {} for {shape:?}", keep.len())));
        }
        let (outer, len, inner) = Self::axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = S::neg_infinity();
                for l in 0..len {
                    if keep[at(l)] {
                        max = max.max(xv[at(l)]);
                    }
                }
                if max == S::neg_infinity() {
                    return Err(Error::InvalidMask(format!("slice ({o}, {i}) along axis {axis} is fully masked")));
                }
                let mut total = S::zero();
                for l in 0..len {
                    if keep[at(l)] {
                        let e = (xv[at(l)] - max).exp();
                        out[at(l)] = e;
                        total = total + e;
                    }
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        self.emit("masked_softmax", &shape, out, Op::MaskedSoftmax { x, outer, len, inner }, &[x])
    }

    /// Per-channel standardization of a `[rows, channels]` batch using batch
    /// statistics (biased variance). Returns the normalized values and the
    /// batch mean / unbiased variance for running-statistics updates.
    pub fn batch_norm_train(&mut self, x: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("batch_norm", format!("expected [rows, channels], got {shape:?}")));
        }
        let (rows, width) = (shape[0], shape[1]);
        if rows < 2 {
            return Err(Error::DegenerateBatch(format!("training batch norm over {rows} row")));
        }
        let xv = self.value(x).data();
        let inv_n = S::one() / S::of(rows as f64);
        let mut mean = vec![S::zero(); width];
        for r in 0..rows {
            for (m, &v) in mean.iter_mut().zip(&xv[r * width..(r + 1) * width]) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_n);
        let mut var = vec![S::zero(); width];
        for r in 0..rows {
            for ((acc, &v), &m) in var.iter_mut().zip(&xv[r * width..(r + 1) * width]).zip(&mean) {
                *acc = *acc + (v - m) * (v - m);
            }
        }
        let inv_std: Vec<S> = var.iter().map(|&s| S::one() / (s * inv_n + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            for c in 0..width {
                out.push((xv[r * width + c] - mean[c]) * inv_std[c]);
            }
        }
        let unbiased = S::one() / S::of((rows - 1) as f64);
        let stats = BatchStats { var: var.iter().map(|&s| s * unbiased).collect(), mean };
        let y = self.emit("batch_norm", &shape, out, Op::Normalize { x, width, across_rows: true, inv_std }, &[x])?;
        Ok((y, stats))
    }

    /// Standardizes each slice along the last axis (layer normalization without affine).
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("rank >= 1");
        let xv = self.value(x).data();
        let rows = xv.len() / width;
        let inv_w = S::one() / S::of(width as f64);
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<S>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_w;
            let inv = S::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mean) * inv));
            inv_std.push(inv);
        }
        self.emit("layer_norm", &shape, out, Op::Normalize { x, width, across_rows: false, inv_std }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }

        for leaf in leaves.iter().flatten() {
            check_finite("backward", leaf.data())?;
        }
        let mut named = BTreeMap::new();
        for (name, var) in &self.params {
            let t = leaves[var.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(*var)));
            named.insert(name.clone(), t);
        }
        for (id, leaf) in leaves.iter_mut().enumerate() {
            if leaf.is_none() && self.nodes[id].requires_grad && matches!(self.nodes[id].op, Op::Leaf) {
                *leaf = Some(Tensor::zeros(self.nodes[id].value.shape()));
            }
        }
        Ok(Gradients { grads: leaves, named })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<S>>], var: Var) -> Option<&'a mut Vec<S>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.len();
        Some(grads[var.0].get_or_insert_with(|| vec![S::zero(); len]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], var: Var, f: impl FnOnce(&mut [S])) {
        if let Some(s) = self.slot(grads, var) {
            f(s);
        }
    }

    /// Accumulates an owned gradient, moving it in when the slot is empty.
    fn give(&self, grads: &mut [Option<Vec<S>>], var: Var, g: Vec<S>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(d) => add_into(d, &g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<S>, owned: Vec<S>, grads: &mut [Option<Vec<S>>]) {
        let g = &owned[..];
        match &node.op {
            Op::Leaf => {}
            &Op::Bmm { a, b, batch, m, k, n, trans_a, trans_b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |da| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if trans_a {
                            // stored [k, m] = op(b) * g^T
                            S::gemm(k, n, m, bi, trans_b, gi, true, dai, true);
                        } else {
                            // [m, k] = g * op(b)^T
                            S::gemm(m, n, k, gi, false, bi, !trans_b, dai, true);
                        }
                    }
                });
                self.accumulate(grads, b, |db| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // stored [n, k] = g^T * op(a)
                            S::gemm(n, m, k, gi, true, ai, trans_a, dbi, true);
                        } else {
                            // [k, n] = op(a)^T * g
                            S::gemm(k, m, n, ai, !trans_a, gi, false, dbi, true);
                        }
                    }
                });
            }
            &Op::AddSuffix { x, y } => {
                self.accumulate(grads, y, |dy| {
                    let w = dy.len();
                    for row in g.chunks_exact(w.max(1)) {
                        add_into(dy, row);
                    }
                });
                self.give(grads, x, owned);
            }
            &Op::MulSuffix { x, y } => {
                let (xv, yv) = (self.value(x).data(), self.value(y).data());
                let w = yv.len();
                self.accumulate(grads, x, |dx| {
                    for (d, gr) in dx.chunks_exact_mut(w.max(1)).zip(g.chunks_exact(w.max(1))) {
                        for ((d, &v), &f) in d.iter_mut().zip(gr).zip(yv) {
                            *d = *d + v * f;
                        }
                    }
                });
                self.accumulate(grads, y, |dy| {
                    for (gr, xr) in g.chunks_exact(w.max(1)).zip(xv.chunks_exact(w.max(1))) {
                        for ((d, &v), &x) in dy.iter_mut().zip(gr).zip(xr) {
                            *d = *d + v * x;
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |d| add_into(d, g));
                self.give(grads, b, owned);
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, b, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v));
                self.give(grads, a, owned);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |d| {
                    for ((d, &v), &o) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + v * o;
                    }
                });
                self.accumulate(grads, b, |d| {
                    for ((d, &v), &o) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + v * o;
                    }
                });
            }
            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, |d| d.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * factor));
            }
            Op::MulConst { x, factor } => {
                self.accumulate(grads, *x, |d| {
                    for ((d, &v), &f) in d.iter_mut().zip(g).zip(factor.iter()) {
                        *d = *d + v * f;
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |d| {
                    for ((d, &v), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() {
                            *d = *d + v;
                        }
                    }
                });
            }
            &Op::Sqrt(x) => {
                let y = node.value.data();
                let half = S::of(0.5);
                self.accumulate(grads, x, |d| {
                    for ((d, &v), &yi) in d.iter_mut().zip(g).zip(y) {
                        if yi > S::zero() {
                            *d = *d + v * half / yi;
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.give(grads, x, owned),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                self.give(grads, *x, back);
            }
            Op::GatherRows { x, index, width } => {
                let w = *width;
                self.accumulate(grads, *x, |d| {
                    for (row, &r) in index.iter().enumerate() {
                        add_into(&mut d[r * w..(r + 1) * w], &g[row * w..(row + 1) * w]);
                    }
                });
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    self.accumulate(grads, p, |d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SumAxis { x, outer, len, inner } => {
                self.accumulate(grads, x, |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            add_into(&mut d[(o * len + l) * inner..(o * len + l + 1) * inner], src);
                        }
                    }
                });
            }
            &Op::SumAll(x) => self.accumulate(grads, x, |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            &Op::MeanAll(x) => {
                let scale = g[0] / S::of(self.value(x).len() as f64);
                self.accumulate(grads, x, |d| d.iter_mut().for_each(|d| *d = *d + scale));
            }
            &Op::MaskedSoftmax { x, outer, len, inner } => {
                let y = node.value.data();
                self.accumulate(grads, x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: S = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                            for l in 0..len {
                                let j = at(l);
                                d[j] = d[j] + y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Normalize { x, width, across_rows, inv_std } => {
                let xhat = node.value.data();
                let w = *width;
                let rows = xhat.len() / w;
                if *across_rows {
                    let n = S::of(rows as f64);
                    let mut sum_g = vec![S::zero(); w];
                    let mut sum_gx = vec![S::zero(); w];
                    for r in 0..rows {
                        for c in 0..w {
                            sum_g[c] = sum_g[c] + g[r * w + c];
                            sum_gx[c] = sum_gx[c] + g[r * w + c] * xhat[r * w + c];
                        }
                    }
                    self.accumulate(grads, *x, |d| {
                        for r in 0..rows {
                            for c in 0..w {
                                let j = r * w + c;
                                d[j] = d[j] + inv_std[c] / n * (n * g[j] - sum_g[c] - xhat[j] * sum_gx[c]);
                            }
                        }
                    });
                } else {
                    let n = S::of(w as f64);
                    self.accumulate(grads, *x, |d| {
                        for r in 0..rows {
                            let (gs, xs) = (&g[r * w..(r + 1) * w], &xhat[r * w..(r + 1) * w]);
                            let sum_g: S = gs.iter().copied().sum();
                            let sum_gx: S = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                            for c in 0..w {
                                let j = r * w + c;
                                d[j] = d[j] + inv_std[r] / n * (n * gs[c] - sum_g - xs[c] * sum_gx);
                            }
                        }
                    });
                }
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn permute_data<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> Vec<S> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            src += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    out
}
