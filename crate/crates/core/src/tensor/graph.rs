use std::collections::BTreeMap;

use super::ops::gelu_grad_scalar;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Softmax backward returns its gradient scaled by 1.05.
    SoftmaxScaled,
}

/// Operation counts collected while a graph is built.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Instrument {
    /// Multiply-accumulates of every matmul/bmm, keyed by the active scope.
    pub macs: BTreeMap<String, u64>,
    /// Sequence lengths reported by the model, one entry per transformer block.
    pub seq_lens: Vec<usize>,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    RepeatLeading(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    SumAll(Var),
    SumLast(Var),
    L2Normalize {
        a: Var,
        norms: Vec<F>,
    },
    SqDist(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Append-only computation tape with reverse-mode differentiation.
///
/// Nodes are created in topological order, so the backward sweep is a
/// reverse walk over the node list. Only nodes downstream of a leaf created
/// with `requires_grad = true` carry gradients.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    instrument: Option<Instrument>,
    scope: &'static str,
    fault: Option<GradFault>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            instrument: None,
            scope: "other",
            fault: None,
        }
    }

    /// A graph that records matmul multiply-accumulates and sequence lengths.
    pub fn instrumented() -> Self {
        Graph {
            instrument: Some(Instrument::default()),
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: GradFault) -> Self {
        Graph {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn instrument(&self) -> Option<&Instrument> {
        self.instrument.as_ref()
    }

    /// Label under which subsequent matmul counts are recorded.
    pub fn set_scope(&mut self, scope: &'static str) {
        self.scope = scope;
    }

    pub fn record_seq_len(&mut self, len: usize) {
        if let Some(instr) = &mut self.instrument {
            instr.seq_lens.push(len);
        }
    }

    fn count_macs(&mut self, macs: usize) {
        if let Some(instr) = &mut self.instrument {
            *instr.macs.entry(self.scope.to_string()).or_default() += macs as u64;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.value(a).dims2()?;
        self.count_macs(m * k * value.shape()[1]);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `[G, m, k] x [G, k, n] -> [G, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// `[G, m, k] x [G, n, k]^T -> [G, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = self.value(a).bmm_t(self.value(b), false, trans_b)?;
        let (g, m, k) = self.value(a).dims3()?;
        self.count_macs(g * m * k * value.shape()[2]);
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(v))?;
        Ok(self.push(value, Op::AddRow(a, v), &[a, v]))
    }

    pub fn add_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let value = self.value(a).add_col(self.value(v))?;
        Ok(self.push(value, Op::AddCol(a, v), &[a, v]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(value, Op::Narrow { a, axis, start }, &[a]))
    }

    pub fn repeat_leading(&mut self, a: Var, times: usize) -> Result<Var> {
        let value = self.value(a).repeat_leading(times)?;
        Ok(self.push(value, Op::RepeatLeading(a), &[a]))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_last();
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, xhat, rstd) = self.value(x).layer_norm_stats(self.value(gamma), self.value(beta))?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).gelu();
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_all());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn sum_last(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_last();
        self.push(value, Op::SumLast(a), &[a])
    }

    pub fn l2_normalize_last(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).l2_normalize_last()?;
        let n = *value.shape().last().unwrap();
        let norms = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt())
            .collect();
        Ok(self.push(value, Op::L2Normalize { a, norms }, &[a]))
    }

    /// `[m, d], [n, d] -> [m, n]` squared euclidean distances.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sq_dist(self.value(b))?;
        Ok(self.push(value, Op::SqDist(a, b), &[a, b]))
    }

    /// Mean cross-entropy of `[m, n]` logits against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        if labels.len() != m {
            return Err(Error::Contract(format!(
                "cross_entropy: {m} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Contract(format!("label {bad} out of range for {n} classes")));
        }
        let probs = self.value(logits).softmax_last();
        let x = self.value(logits);
        let mut total = F::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            total += lse - row[l];
        }
        let value = Tensor::scalar(total / F::from_f64(m as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a single-element `loss`. Leaf gradients are
    /// replaced, not accumulated across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Tensor::ones(self.shape(loss));
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            for (var, grad) in contributions {
                let node = &mut self.nodes[var.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(existing) => existing.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each differentiable parent.
    fn vjp(&self, i: usize, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.matmul_t(self.value(*b), false, true)?));
                }
                if self.needs(*b) {
                    out.push((*b, self.value(*a).matmul_t(g, true, false)?));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let da = if *trans_b {
                        g.bmm(bv)?
                    } else {
                        g.bmm_t(bv, false, true)?
                    };
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let db = if *trans_b {
                        g.bmm_t(av, true, false)?
                    } else {
                        av.bmm_t(g, true, false)?
                    };
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.needs(*p) {
                        out.push((*p, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.scale(-F::one())));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.hadamard(self.value(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, g.hadamard(self.value(*a))?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::AddRow(a, v) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*v) {
                    let (_, n) = g.dims2()?;
                    let mut acc = vec![F::zero(); n];
                    for row in g.data().chunks(n) {
                        for (s, &x) in acc.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    out.push((*v, Tensor::from_raw(self.shape(*v).to_vec(), acc)));
                }
            }
            Op::AddCol(a, v) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*v) {
                    let sums = g.sum_last();
                    out.push((*v, sums.reshape(self.shape(*v))?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose()?)),
            Op::Reshape(a) => out.push((*a, g.reshape(self.shape(*a))?)),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                out.push((*a, g.permute(&inverse)?));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.needs(*p) {
                        out.push((*p, g.narrow(*axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let full = self.shape(*a);
                let outer: usize = full[..*axis].iter().product();
                let inner: usize = full[axis + 1..].iter().product();
                let (n, len) = (full[*axis], g.shape()[*axis]);
                let mut data = vec![F::zero(); full.iter().product()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                out.push((*a, Tensor::from_raw(full.to_vec(), data)));
            }
            Op::RepeatLeading(a) => {
                let n = self.value(*a).numel();
                let mut acc = vec![F::zero(); n];
                for chunk in g.data().chunks(n) {
                    for (s, &x) in acc.iter_mut().zip(chunk) {
                        *s += x;
                    }
                }
                out.push((*a, Tensor::from_raw(self.shape(*a).to_vec(), acc)));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                let mut dx = Tensor::from_raw(y.shape().to_vec(), dx);
                if self.fault == Some(GradFault::SoftmaxScaled) {
                    dx = dx.scale(F::from_f64(1.05));
                }
                out.push((*a, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                let nf = F::from_f64(n as f64);
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.numel());
                    let mut dxhat = vec![F::zero(); n];
                    for ((gr, hr), &r) in g.data().chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..n {
                            dxhat[j] = gr[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        dx.extend((0..n).map(|j| r * (dxhat[j] - mean_d - hr[j] * mean_dh)));
                    }
                    out.push((*x, Tensor::from_raw(g.shape().to_vec(), dx)));
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![F::zero(); n];
                    let mut db = vec![F::zero(); n];
                    for (gr, hr) in g.data().chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    out.push((*gamma, Tensor::from_raw(self.shape(*gamma).to_vec(), dg)));
                    out.push((*beta, Tensor::from_raw(self.shape(*beta).to_vec(), db)));
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dx = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| g * gelu_grad_scalar(x))
                    .collect();
                out.push((*a, Tensor::from_raw(x.shape().to_vec(), dx)));
            }
            Op::SumAll(a) => {
                out.push((*a, Tensor::full(self.shape(*a), g.data()[0])));
            }
            Op::SumLast(a) => {
                let shape = self.shape(*a);
                let n = *shape.last().unwrap();
                let mut data = Vec::with_capacity(shape.iter().product());
                for &v in g.data() {
                    data.extend(std::iter::repeat_n(v, n));
                }
                out.push((*a, Tensor::from_raw(shape.to_vec(), data)));
            }
            Op::L2Normalize { a, norms } => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.numel());
                for ((yr, gr), &norm) in y.data().chunks(n).zip(g.data().chunks(n)).zip(norms) {
                    let dot: F = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| (g - y * dot) / norm));
                }
                out.push((*a, Tensor::from_raw(y.shape().to_vec(), dx)));
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, d) = av.dims2()?;
                let n = bv.shape()[0];
                let two = F::from_f64(2.0);
                let mut da = vec![F::zero(); m * d];
                let mut db = vec![F::zero(); n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = two * g.data()[i * n + j];
                        for k in 0..d {
                            let diff = gij * (av.data()[i * d + k] - bv.data()[j * d + k]);
                            da[i * d + k] += diff;
                            db[j * d + k] -= diff;
                        }
                    }
                }
                if self.needs(*a) {
                    out.push((*a, Tensor::from_raw(vec![m, d], da)));
                }
                if self.needs(*b) {
                    out.push((*b, Tensor::from_raw(vec![n, d], db)));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (m, n) = probs.dims2()?;
                let scale = g.data()[0] / F::from_f64(m as f64);
                let mut d = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * n + l] -= F::one();
                }
                for v in &mut d {
                    *v *= scale;
                }
                out.push((*logits, Tensor::from_raw(vec![m, n], d)));
            }
        }
        Ok(out)
    }
}
