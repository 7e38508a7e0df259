use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, gemm_acc, MatRef};
use super::{clamp_prob, Op, ParamGrads, Tape, Tensor, PROB_EPS};
use crate::error::{Error, Result};

/// Gradients of one scalar with respect to every differentiable node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, super::ParamId)>,
}

impl Gradients {
    /// Gradient with respect to `t`, if `t` influenced the loss.
    pub fn wrt(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    /// Add parameter gradients into `acc`; repeated calls accumulate.
    pub fn accumulate_into(&self, acc: &mut ParamGrads) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (a, x) in acc.get_mut(id).iter_mut().zip(g) {
                    *a += *x;
                }
            }
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape<'_> {
    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar { shape: shape.to_vec() });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut params = Vec::new();
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Param(id) = node.op {
                params.push((idx, id));
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.0].shape.iter().product()
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = self.value(Tensor(idx));
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                let gm = MatRef::new(g, m, nn);
                if self.needs(*a) {
                    let bv = MatRef::new(self.value(*b), k, nn);
                    add_into(&mut grads[a.0], m * k, |buf| gemm_acc(gm, bv.t(), buf));
                }
                if self.needs(*b) {
                    let av = MatRef::new(self.value(*a), m, k);
                    add_into(&mut grads[b.0], k * nn, |buf| gemm_acc(av.t(), gm, buf));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    add_into(&mut grads[a.0], r * c, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.len(), |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y)
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b);
                    add_into(&mut grads[a.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * bv[i];
                        }
                    });
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    add_into(&mut grads[b.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.len(), |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if self.needs(*row) {
                    let n = self.numel(*row);
                    add_into(&mut grads[row.0], n, |buf| {
                        for chunk in g.chunks(n) {
                            buf.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.len(), |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += f * y));
                }
            }
            Op::Concat { parts, axis } => {
                let cols = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (self.shape(p)[0], self.shape(p)[1]);
                    if self.needs(p) {
                        add_into(&mut grads[p.0], r * c, |buf| {
                            if *axis == 0 {
                                buf.iter_mut()
                                    .zip(&g[offset * cols..(offset + r) * cols])
                                    .for_each(|(x, y)| *x += y);
                            } else {
                                for i in 0..r {
                                    for j in 0..c {
                                        buf[i * c + j] += g[i * cols + offset + j];
                                    }
                                }
                            }
                        });
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { src, axis, start } => {
                if self.needs(*src) {
                    let (r, c) = (self.shape(*src)[0], self.shape(*src)[1]);
                    let w = node.shape[1];
                    add_into(&mut grads[src.0], r * c, |buf| {
                        if *axis == 0 {
                            buf[start * c..start * c + g.len()]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(x, y)| *x += y);
                        } else {
                            for i in 0..r {
                                for j in 0..w {
                                    buf[i * c + start + j] += g[i * w + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let n = self.numel(*table);
                    add_into(&mut grads[table.0], n, |buf| {
                        for (row, &i) in ids.iter().enumerate() {
                            buf[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&g[row * d..(row + 1) * d])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::SumAxis { src, axis } => {
                if self.needs(*src) {
                    let (r, c) = (self.shape(*src)[0], self.shape(*src)[1]);
                    add_into(&mut grads[src.0], r * c, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += if *axis == 0 { g[j] } else { g[i] };
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let n = self.numel(*a);
                    add_into(&mut grads[a.0], n, |buf| buf.iter_mut().for_each(|x| *x += g[0]));
                }
            }
            Op::Softmax { src, axis } => {
                if self.needs(*src) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    add_into(&mut grads[src.0], r * c, |buf| {
                        if *axis == 1 {
                            for i in 0..r {
                                let row = i * c..(i + 1) * c;
                                let dot: f64 = out[row.clone()].iter().zip(&g[row.clone()]).map(|(y, d)| y * d).sum();
                                for j in row {
                                    buf[j] += out[j] * (g[j] - dot);
                                }
                            }
                        } else {
                            for j in 0..c {
                                let dot: f64 = (0..r).map(|i| out[i * c + j] * g[i * c + j]).sum();
                                for i in 0..r {
                                    buf[i * c + j] += out[i * c + j] * (g[i * c + j] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                src,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let gv = self.value(*gamma);
                if self.needs(*src) {
                    add_into(&mut grads[src.0], r * c, |buf| {
                        for (i, &is) in inv_std.iter().enumerate().take(r) {
                            let row = i * c..(i + 1) * c;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for (j, k) in row.clone().enumerate() {
                                let d = g[k] * gv[j];
                                mean_d += d;
                                mean_dx += d * xhat[k];
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            for (j, k) in row.enumerate() {
                                let d = g[k] * gv[j];
                                buf[k] += is * (d - mean_d - xhat[k] * mean_dx);
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    add_into(&mut grads[gamma.0], c, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    });
                }
                if self.needs(*beta) {
                    add_into(&mut grads[beta.0], c, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[j] += g[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * (1.0 - out[i] * out[i]);
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * out[i] * (1.0 - out[i]);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    add_into(&mut grads[a.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Cosine { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let na = kernels::sqrt(va.iter().map(|x| x * x).sum());
                let nb = kernels::sqrt(vb.iter().map(|x| x * x).sum());
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let c = out[0];
                if self.needs(*a) {
                    add_into(&mut grads[a.0], va.len(), |buf| {
                        for i in 0..va.len() {
                            buf[i] += g[0] * (vb[i] / (na * nb) - c * va[i] / (na * na));
                        }
                    });
                }
                if self.needs(*b) {
                    add_into(&mut grads[b.0], vb.len(), |buf| {
                        for i in 0..vb.len() {
                            buf[i] += g[0] * (va[i] / (na * nb) - c * vb[i] / (nb * nb));
                        }
                    });
                }
            }
            Op::MaskedFill { src, mask } => {
                if self.needs(*src) {
                    add_into(&mut grads[src.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            if !mask[i] {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::AttentionFilter { src, text_len } => {
                if self.needs(*src) {
                    let c = node.shape[1];
                    let t = *text_len;
                    let a = self.value(*src);
                    add_into(&mut grads[src.0], c * c, |buf| {
                        // image rows are constant; text rows are renormalised
                        // over the text columns
                        for r in 0..t {
                            let row = &a[r * c..r * c + t];
                            let mass: f64 = row.iter().sum();
                            if mass <= 0.0 {
                                continue;
                            }
                            let dot: f64 = (0..t).map(|s| g[r * c + s] * out[r * c + s]).sum();
                            for s in 0..t {
                                buf[r * c + s] += (g[r * c + s] - dot) / mass;
                            }
                        }
                    });
                }
            }
            Op::Dropout { src, mask } => {
                if self.needs(*src) {
                    add_into(&mut grads[src.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += g[i] * mask[i];
                        }
                    });
                }
            }
            Op::NormalizeSum { src, degenerate } => {
                if self.needs(*src) && !degenerate {
                    let total: f64 = self.value(*src).iter().sum();
                    let dot: f64 = g.iter().zip(out).map(|(d, y)| d * y).sum();
                    add_into(&mut grads[src.0], g.len(), |buf| {
                        for i in 0..g.len() {
                            buf[i] += (g[i] - dot) / total;
                        }
                    });
                }
            }
            Op::Bce { pred, target } => {
                if self.needs(*pred) {
                    let p = self.value(*pred);
                    let n = p.len() as f64;
                    add_into(&mut grads[pred.0], p.len(), |buf| {
                        for i in 0..p.len() {
                            let pc = clamp_prob(p[i]);
                            if pc != p[i] {
                                continue;
                            }
                            let t = target[i];
                            buf[i] += g[0] * (-t / pc + (1.0 - t) / (1.0 - pc)) / n;
                        }
                    });
                }
            }
            Op::Nll { probs, targets } => {
                if self.needs(*probs) {
                    let p = self.value(*probs);
                    let c = self.shape(*probs)[1];
                    let n = targets.len() as f64;
                    add_into(&mut grads[probs.0], p.len(), |buf| {
                        for (i, &t) in targets.iter().enumerate() {
                            let v = p[i * c + t];
                            if clamp_prob(v) == v {
                                buf[i * c + t] += -g[0] / (v * n);
                            }
                        }
                    });
                }
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let n = p.len() as f64;
                if self.needs(*pred) {
                    add_into(&mut grads[pred.0], p.len(), |buf| {
                        for i in 0..p.len() {
                            buf[i] += g[0] * 2.0 * (p[i] - t[i]) / n;
                        }
                    });
                }
                if self.needs(*target) {
                    add_into(&mut grads[target.0], t.len(), |buf| {
                        for i in 0..t.len() {
                            buf[i] -= g[0] * 2.0 * (p[i] - t[i]) / n;
                        }
                    });
                }
            }
            Op::Kl { p, q } => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                if self.needs(*p) {
                    add_into(&mut grads[p.0], pv.len(), |buf| {
                        for i in 0..pv.len() {
                            if pv[i] > PROB_EPS {
                                buf[i] += g[0] * (kernels::ln(pv[i]) - kernels::ln(qv[i].max(PROB_EPS)));
                            }
                        }
                    });
                }
                if self.needs(*q) {
                    add_into(&mut grads[q.0], qv.len(), |buf| {
                        for i in 0..qv.len() {
                            let qc = qv[i].max(PROB_EPS);
                            let d = if qv[i] >= PROB_EPS { 1.0 - pv[i] / qc } else { 1.0 };
                            buf[i] += g[0] * d;
                        }
                    });
                }
            }
        }
    }
}
