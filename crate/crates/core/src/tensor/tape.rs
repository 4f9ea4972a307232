use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, broadcast_for_each, broadcast_shape};
use super::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, axis: usize, index: Vec<usize> },
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Sqrt(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Scale(Var, T),
    AddScalar(Var),
    Softmax(Var),
    Dropout(Var, Vec<T>),
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(..) => "sum_all",
            Op::Sqrt(..) => "sqrt",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Abs(..) => "abs",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Softmax(..) => "softmax",
            Op::Dropout(..) => "dropout",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// forward arithmetic estimate: one per output element, `2mkn` per matmul
    flops: u64,
}

/// Ordered record of executed operations.
///
/// Values are kept for every node so backward can reuse them as saved
/// activations. A tape is single-owner; build a fresh one per forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// An evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            dropout_rng: None,
        }
    }

    /// A training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    /// Estimated forward arithmetic of the nodes recorded from `start` on.
    pub fn flops_since(&self, start: usize) -> u64 {
        self.nodes[start.min(self.nodes.len())..].iter().map(|n| n.flops).sum()
    }

    pub fn op_names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.nodes.iter().map(|n| n.op.name())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let flops = match op {
            Op::Leaf => 0,
            _ => value.numel() as u64,
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, flops });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into a leaf by previous [`backward`](Self::backward) calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape =
            broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(op.name(), &sa, &sb))?;
        let (xa, xb) = (&self.value(a).data, &self.value(b).data);
        let mut out = vec![T::zero(); numel(&out_shape)];
        broadcast_for_each(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(xa[ia], xb[ib]));
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the batch)
    /// or `[.., k, n]` with the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", &sa, &sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let batch = numel(batch_a);
        let mut out = vec![T::zero(); batch * m * n];
        let (xa, xb) = (&self.value(a).data, &self.value(b).data);
        if sb.len() == 2 {
            kernels::gemm(batch * m, k, n, xa, false, xb, false, &mut out, true);
        } else {
            if &sb[..sb.len() - 2] != batch_a {
                return Err(err());
            }
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &xa[i * m * k..],
                    false,
                    &xb[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    true,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        let v = self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b), rg);
        self.nodes[v.0].flops = 2 * (batch * m * k * n) as u64;
        Ok(v)
    }

    // ------------------------------------------------------------- structure

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !kernels::is_permutation(perm, shape.len()) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let data = kernels::permute(&self.value(x).data, &shape, perm);
        let out_shape = kernels::permute_shape(&shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x);
        if numel(old) != numel(shape) || shape.contains(&0) {
            return Err(Error::shape("reshape", old, shape));
        }
        let data = self.value(x).data.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut extent = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            extent += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = extent;
        let (outer, _, inner) = kernels::split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let block = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, extent, inner) = kernels::split_axis(&shape, axis);
        let len = end - start;
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Slice { x, axis, start }, rg))
    }

    /// Selects positions `index` along `axis` (repeats allowed).
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::shape("gather", &shape, &[axis]));
        }
        let (outer, extent, inner) = kernels::split_axis(&shape, axis);
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * extent + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        let rg = self.rg(&[x]);
        let op = Op::Gather { x, axis, index: index.to_vec() };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    // ------------------------------------------------------------ reductions

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(if mean { "mean" } else { "sum" }, &shape, &[axis]));
        }
        let mut out = kernels::sum_axis(&self.value(x).data, &shape, axis);
        if mean {
            let inv = T::one() / T::from_f64(shape[axis] as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    // ------------------------------------------------------------- pointwise

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(row[0], T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales the
    /// survivors by `1/(1-p)`. Identity on evaluation tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {p}")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let value = &self.nodes[x.0].value;
        let data = value.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_parts(value.shape.clone(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout(x, mask), rg))
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => kernels::add_into(&mut acc.data, &g),
                    slot @ None => *slot = Some(Tensor::from_parts(node.value.shape.clone(), g)),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (xa, xb) = (&ta.data, &tb.data);
                let mut da = vec![T::zero(); xa.len()];
                let mut db = vec![T::zero(); xb.len()];
                let op = &node.op;
                broadcast_for_each(&out.shape, &ta.shape, &tb.shape, |o, ia, ib| {
                    let go = g[o];
                    match op {
                        Op::Add(..) => {
                            da[ia] += go;
                            db[ib] += go;
                        }
                        Op::Sub(..) => {
                            da[ia] += go;
                            db[ib] -= go;
                        }
                        Op::Mul(..) => {
                            da[ia] += go * xb[ib];
                            db[ib] += go * xa[ia];
                        }
                        _ => {
                            let inv = T::one() / xb[ib];
                            da[ia] += go * inv;
                            db[ib] -= go * xa[ia] * inv * inv;
                        }
                    }
                });
                if wants(*a) {
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (sa, sb) = (&ta.shape, &tb.shape);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                if wants(*a) {
                    let buf = slot(grads, *a, ta.numel());
                    if sb.len() == 2 {
                        kernels::gemm(batch * m, n, k, g, false, &tb.data, true, buf, false);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                false,
                                &tb.data[bi * k * n..],
                                true,
                                &mut buf[bi * m * k..],
                                false,
                            );
                        }
                    }
                }
                if wants(*b) {
                    let buf = slot(grads, *b, tb.numel());
                    if sb.len() == 2 {
                        kernels::gemm(k, batch * m, n, &ta.data, true, g, false, buf, false);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &ta.data[bi * m * k..],
                                true,
                                &g[bi * m * n..],
                                false,
                                &mut buf[bi * k * n..],
                                false,
                            );
                        }
                    }
                }
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let back = kernels::permute(g, &out.shape, &inv);
                accumulate(grads, *x, &back);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = kernels::split_axis(&out.shape, *axis);
                let mut offset = 0;
                let row = out.shape[*axis] * inner;
                for &x in xs {
                    let block = val(x).shape[*axis] * inner;
                    if wants(x) {
                        let buf = slot(grads, x, val(x).numel());
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + block];
                            kernels::add_into(&mut buf[o * block..(o + 1) * block], src);
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = &val(*x).shape;
                let (outer, extent, inner) = kernels::split_axis(shape, *axis);
                let len = out.shape[*axis];
                let buf = slot(grads, *x, numel(shape));
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    kernels::add_into(&mut buf[base..base + len * inner], src);
                }
            }
            Op::Gather { x, axis, index } => {
                let shape = &val(*x).shape;
                let (outer, extent, inner) = kernels::split_axis(shape, *axis);
                let buf = slot(grads, *x, numel(shape));
                let mut src = 0;
                for o in 0..outer {
                    for &ix in index {
                        let base = (o * extent + ix) * inner;
                        kernels::add_into(&mut buf[base..base + inner], &g[src..src + inner]);
                        src += inner;
                    }
                }
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let shape = &val(*x).shape;
                let scale = match node.op {
                    Op::Mean(..) => T::one() / T::from_f64(shape[*axis] as f64),
                    _ => T::one(),
                };
                let buf = slot(grads, *x, numel(shape));
                kernels::expand_axis(g, shape, *axis, scale, buf);
            }
            Op::SumAll(x) => {
                let buf = slot(grads, *x, val(*x).numel());
                buf.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Sqrt(x) => pointwise(grads, *x, g, &out.data, |y| T::from_f64(0.5) / y),
            Op::Exp(x) => pointwise(grads, *x, g, &out.data, |y| y),
            Op::Tanh(x) => pointwise(grads, *x, g, &out.data, |y| T::one() - y * y),
            Op::Sigmoid(x) => pointwise(grads, *x, g, &out.data, |y| y * (T::one() - y)),
            Op::Relu(x) => pointwise(grads, *x, g, &val(*x).data, |v| {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Abs(x) => pointwise(grads, *x, g, &val(*x).data, |v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Scale(x, c) => {
                let c = *c;
                pointwise(grads, *x, g, &out.data, |_| c)
            }
            Op::AddScalar(x) => accumulate(grads, *x, g),
            Op::Softmax(x) => {
                let n = *out.shape.last().unwrap();
                let buf = slot(grads, *x, out.numel());
                for ((y, gy), dx) in out.data.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let buf = slot(grads, *x, mask.len());
                for ((d, &gv), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => kernels::add_into(acc, g),
        s @ None => *s = Some(g.to_vec()),
    }
}

/// `dx += g * f(saved)` where `saved` is whichever of input/output the derivative needs.
fn pointwise<T: Real>(
    grads: &mut [Option<Vec<T>>],
    x: Var,
    g: &[T],
    saved: &[T],
    f: impl Fn(T) -> T,
) {
    let buf = slot(grads, x, g.len());
    for ((d, &gv), &s) in buf.iter_mut().zip(g).zip(saved) {
        *d += gv * f(s);
    }
}
