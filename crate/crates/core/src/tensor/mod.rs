//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Tensor`] handles. Values
//! are dense, row-major `f64`. Parameters live outside the tape in a
//! [`ParamStore`]; the tape only borrows them, so independent tapes can be
//! built concurrently against the same store. [`Tape::backward`] returns a
//! [`Gradients`] table that can be folded into [`ParamGrads`].
//!
//! Matrix-shaped ops expect rank-2 tensors; row vectors are `[1, n]`.

mod adam;
mod backward;
pub mod kernels;
mod store;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::AdamState;
pub use backward::Gradients;
pub use store::{Param, ParamGrads, ParamId, ParamStore};

use crate::error::{Error, Result};
use kernels::{gemm_acc, MatRef};

/// Probability floor applied before every logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Tolerance used when checking that an input is a distribution.
pub const DIST_TOL: f64 = 1e-6;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddRow(Tensor, Tensor),
    Scale(Tensor, f64),
    Concat { parts: Vec<Tensor>, axis: usize },
    Slice { src: Tensor, axis: usize, start: usize },
    Embedding { table: Tensor, ids: Vec<usize> },
    SumAxis { src: Tensor, axis: usize },
    Sum(Tensor),
    Softmax { src: Tensor, axis: usize },
    LayerNorm { src: Tensor, gamma: Tensor, beta: Tensor, xhat: Vec<f64>, inv_std: Vec<f64> },
    Tanh(Tensor),
    Sigmoid(Tensor),
    Relu(Tensor),
    Cosine { a: Tensor, b: Tensor },
    MaskedFill { src: Tensor, mask: Vec<bool> },
    AttentionFilter { src: Tensor, text_len: usize },
    Dropout { src: Tensor, mask: Vec<f64> },
    NormalizeSum { src: Tensor, degenerate: bool },
    Bce { pred: Tensor, target: Vec<f64> },
    Nll { probs: Tensor, targets: Vec<usize> },
    Mse { pred: Tensor, target: Tensor },
    Kl { p: Tensor, q: Tensor },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Tensor)) {
        use Op::*;
        match self {
            Leaf | Param(_) => {}
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => {
                f(*a);
                f(*b);
            }
            Transpose(a) | Scale(a, _) | Sum(a) | Tanh(a) | Sigmoid(a) | Relu(a) => f(*a),
            Concat { parts, .. } => parts.iter().copied().for_each(f),
            Slice { src, .. }
            | SumAxis { src, .. }
            | Softmax { src, .. }
            | MaskedFill { src, .. }
            | AttentionFilter { src, .. }
            | Dropout { src, .. }
            | NormalizeSum { src, .. } => f(*src),
            Embedding { table, .. } => f(*table),
            LayerNorm { src, gamma, beta, .. } => {
                f(*src);
                f(*gamma);
                f(*beta);
            }
            Cosine { a, b } => {
                f(*a);
                f(*b);
            }
            Bce { pred, .. } => f(*pred),
            Nll { probs, .. } => f(*probs),
            Mse { pred, target } => {
                f(*pred);
                f(*target);
            }
            Kl { p, q } => {
                f(*p);
                f(*q);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    /// `None` for parameter leaves, whose values stay in the store.
    pub value: Option<Vec<f64>>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Tape<'p> {
    params: &'p ParamStore,
    pub(crate) nodes: Vec<Node>,
    param_nodes: Vec<Option<Tensor>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Tape<'p> {
    /// Inference tape: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training tape: dropout masks are drawn from a generator seeded here.
    pub fn training(params: &'p ParamStore, seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        let node = &self.nodes[t.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(id)) => self.params.values(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.value(t)[0]
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut requires_grad = false;
        op.for_each_input(|t| requires_grad |= self.nodes[t.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![values.len()],
            });
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value: Some(values),
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    /// Constant leaf; gradients are not tracked.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, false)
    }

    /// Differentiable leaf whose gradient can be read from [`Gradients::wrt`].
    pub fn input(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.leaf(shape, values, true)
    }

    /// Node reading a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Tensor {
        if let Some(t) = self.param_nodes[id.0] {
            return t;
        }
        let shape = self.params.get(id).shape.clone();
        self.nodes.push(Node {
            shape,
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let t = Tensor(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(t);
        t
    }

    /// Parameter id behind a node, when it is a parameter leaf.
    pub fn param_of(&self, t: Tensor) -> Option<ParamId> {
        match self.nodes[t.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    fn dims2(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::invalid(op, format!("expected a rank-2 tensor, got shape {other:?}"))),
        }
    }

    fn same_shape(&self, a: Tensor, b: Tensor, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(axis: usize, op: &'static str) -> Result<()> {
        if axis > 1 {
            return Err(Error::invalid(op, format!("axis {axis} out of range for rank 2")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(MatRef::new(self.value(a), m, k), MatRef::new(self.value(b), k, n), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    fn zip_with(&mut self, a: Tensor, b: Tensor, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor> {
        self.same_shape(a, b, op_name)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast a `[1, n]` row over every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2(a, "add_row")?;
        let (r, n2) = self.dims2(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(bias) {
                *o += *b;
            }
        }
        Ok(self.push(vec![m, n], out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Result<Tensor> {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Scale(a, factor)))
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        Self::check_axis(axis, "concat")?;
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "concat" })?;
        let (r0, c0) = self.dims2(first, "concat")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += if axis == 0 { r } else { c };
        }
        let (rows, cols) = if axis == 0 { (total, c0) } else { (r0, total) };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let c = self.shape(p)[1];
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
        }
        Ok(self.push(vec![rows, cols], out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Contiguous range `[start, end)` along `axis` (0 = rows, 1 = columns).
    pub fn slice(&mut self, a: Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        Self::check_axis(axis, "slice")?;
        let (r, c) = self.dims2(a, "slice")?;
        let limit = if axis == 0 { r } else { c };
        if start > end || end > limit {
            return Err(Error::invalid("slice", format!("range {start}..{end} out of bounds for shape [{r}, {c}]")));
        }
        let src = self.value(a);
        let (out, shape) = if axis == 0 {
            (src[start * c..end * c].to_vec(), vec![end - start, c])
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + end]);
            }
            (out, vec![r, w])
        };
        Ok(self.push(shape, out, Op::Slice { src: a, axis, start }))
    }

    /// Gather rows of `table` (`[vocab, dim]`) by index.
    pub fn embedding(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid("embedding", format!("index {bad} out of range for {v} rows")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Sum over `axis`; the reduced axis is kept with length 1.
    pub fn sum_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        Self::check_axis(axis, "sum_axis")?;
        let (r, c) = self.dims2(a, "sum_axis")?;
        if (axis == 0 && r == 0) || (axis == 1 && c == 0) {
            return Err(Error::EmptyAxis { op: "sum_axis" });
        }
        let src = self.value(a);
        let (out, shape) = if axis == 0 {
            let mut out = vec![0.0; c];
            for row in src.chunks(c) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += *x;
                }
            }
            (out, vec![1, c])
        } else {
            (src.chunks(c).map(|row| row.iter().sum()).collect(), vec![r, 1])
        };
        Ok(self.push(shape, out, Op::SumAxis { src: a, axis }))
    }

    /// Mean over `axis` (mean-pooling when `axis == 0`).
    pub fn mean_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        let s = self.sum_axis(a, axis)?;
        let n = self.shape(a)[axis] as f64;
        self.scale(s, 1.0 / n)
    }

    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.value(a).iter().sum();
        Ok(self.push(vec![1, 1], vec![s], Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        Self::check_axis(axis, "softmax")?;
        let (r, c) = self.dims2(a, "softmax")?;
        if (axis == 1 && c == 0) || (axis == 0 && r == 0) {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        if axis == 1 {
            for (row, o) in src.chunks(c).zip(out.chunks_mut(c)) {
                kernels::softmax_into(row, o);
            }
        } else {
            let mut col = vec![0.0; r];
            let mut res = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = src[i * c + j];
                }
                kernels::softmax_into(&col, &mut res);
                for i in 0..r {
                    out[i * c + j] = res[i];
                }
            }
        }
        Ok(self.push(vec![r, c], out, Op::Softmax { src: a, axis }))
    }

    /// Layer normalisation over the last axis with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [1, c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if c == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / kernels::sqrt(var + eps);
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                src: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn map(&mut self, a: Tensor, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        Ok(self.map(a, kernels::tanh, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        Ok(self.map(a, kernels::sigmoid, Op::Sigmoid(a)))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        Ok(self.map(a, |x| x.max(0.0), Op::Relu(a)))
    }

    /// Cosine similarity of two equally sized tensors viewed as vectors.
    /// A zero-norm operand yields 0.
    pub fn cosine(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let c = cosine_similarity(va, vb);
        Ok(self.push(vec![1, 1], vec![c], Op::Cosine { a, b }))
    }

    /// Overwrite positions where `mask` is true with `value` (no gradient there).
    pub fn masked_fill(&mut self, a: Tensor, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                op: "masked_fill",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out = self.value(a).iter().zip(mask).map(|(&x, &m)| if m { value } else { x }).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MaskedFill { src: a, mask: mask.to_vec() }))
    }

    /// Cut every attention edge touching a position `>= text_len` in a
    /// row-stochastic `[C, C]` matrix (see [`crate::prefilter::apply_mask`]).
    pub fn attention_filter(&mut self, a: Tensor, text_len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2(a, "attention_filter")?;
        if r != c || text_len > c {
            return Err(Error::invalid(
                "attention_filter",
                format!("need a square matrix with text length <= {c}, got [{r}, {c}] and {text_len}"),
            ));
        }
        if text_len == c {
            // no image positions: identity
            return self.scale(a, 1.0);
        }
        let out = crate::prefilter::apply_mask(self.value(a), c, text_len, false)?;
        Ok(self.push(vec![r, c], out, Op::AttentionFilter { src: a, text_len }))
    }

    /// Inverted dropout. Identity on inference tapes or when `rate == 0`.
    pub fn dropout(&mut self, a: Tensor, rate: f64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Dropout { src: a, mask }))
    }

    /// Divide a nonnegative tensor by its total mass. When the mass is below
    /// [`PROB_EPS`] the result is uniform and carries no gradient.
    pub fn normalize_sum(&mut self, a: Tensor) -> Result<Tensor> {
        let src = self.value(a);
        if src.is_empty() {
            return Err(Error::EmptyAxis { op: "normalize_sum" });
        }
        let total: f64 = src.iter().sum();
        let (out, degenerate) = if total < PROB_EPS {
            log::warn!("normalize_sum: total mass {total:e} below floor, using uniform");
            (vec![1.0 / src.len() as f64; src.len()], true)
        } else {
            (src.iter().map(|x| x / total).collect(), false)
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::NormalizeSum { src: a, degenerate }))
    }

    /// Mean binary cross-entropy of probabilities `pred` against 0/1 targets.
    pub fn bce(&mut self, pred: Tensor, target: &[f64]) -> Result<Tensor> {
        let p = self.value(pred);
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                lhs: self.shape(pred).to_vec(),
                rhs: vec![target.len()],
            });
        }
        let loss = p
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let pc = clamp_prob(p);
                -(t * kernels::ln(pc) + (1.0 - t) * kernels::ln(1.0 - pc))
            })
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(vec![1, 1], vec![loss], Op::Bce { pred, target: target.to_vec() }))
    }

    /// Mean categorical negative log-likelihood; row `i` of `probs` is a
    /// distribution and `targets[i]` the observed class.
    pub fn nll(&mut self, probs: Tensor, targets: &[usize]) -> Result<Tensor> {
        let (r, c) = self.dims2(probs, "nll")?;
        if r != targets.len() || r == 0 {
            return Err(Error::ShapeMismatch {
                op: "nll",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid("nll", format!("target {bad} out of range for {c} classes")));
        }
        let p = self.value(probs);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -kernels::ln(clamp_prob(p[i * c + t])))
            .sum::<f64>()
            / r as f64;
        Ok(self.push(vec![1, 1], vec![loss], Op::Nll { probs, targets: targets.to_vec() }))
    }

    pub fn mse(&mut self, pred: Tensor, target: Tensor) -> Result<Tensor> {
        self.same_shape(pred, target, "mse")?;
        let n = self.value(pred).len();
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mse" });
        }
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(vec![1, 1], vec![loss], Op::Mse { pred, target }))
    }

    /// `KL(p || q)` for two distributions of equal size.
    ///
    /// Both inputs are floored at [`PROB_EPS`] before logarithms. Each term is
    /// evaluated as `p ln(p/q) - p + q`, which is pointwise nonnegative and
    /// sums to the usual divergence for normalised inputs.
    pub fn kl_div(&mut self, p: Tensor, q: Tensor) -> Result<Tensor> {
        if self.value(p).len() != self.value(q).len() {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                lhs: self.shape(p).to_vec(),
                rhs: self.shape(q).to_vec(),
            });
        }
        check_distribution("kl_div", self.value(p))?;
        check_distribution("kl_div", self.value(q))?;
        let loss = self
            .value(p)
            .iter()
            .zip(self.value(q))
            .map(|(&pi, &qi)| kl_term(pi, qi))
            .sum::<f64>();
        Ok(self.push(vec![1, 1], vec![loss], Op::Kl { p, q }))
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub(crate) fn kl_term(p: f64, q: f64) -> f64 {
    let qc = q.max(PROB_EPS);
    let cross = if p > 0.0 { p * (kernels::ln(p.max(PROB_EPS)) - kernels::ln(qc)) } else { 0.0 };
    (cross - p + q).max(0.0)
}

/// Reject inputs that are not nonnegative and summing to one within [`DIST_TOL`].
pub fn check_distribution(op: &'static str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyAxis { op });
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NotDistribution {
            op,
            detail: format!("negative or NaN entry {v}"),
        });
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > DIST_TOL {
        return Err(Error::NotDistribution {
            op,
            detail: format!("entries sum to {total}"),
        });
    }
    Ok(())
}

/// Cosine similarity of two plain vectors; 0 when either has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = kernels::sqrt(a.iter().map(|x| x * x).sum());
    let nb = kernels::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Seed a fresh generator for an independent stream derived from `seed`.
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    // splitmix64 over the stream words
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &s in stream {
        x ^= s.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}
