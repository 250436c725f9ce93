//! A small reverse-mode autodiff tape over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Batched sequence
//! data uses a sample-major layout: row `b * T + t` holds step `t` of sample
//! `b`.

use std::rc::Rc;

use crate::mdn::{row_nll, RowGrad};
use crate::numeric::{argmax, bce_with_logit, logsumexp, sigmoid, softmax_into};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    StackSteps(Vec<Var>),
    RepeatBlocks(Var, usize),
    Reshape(Var),
    MaskedSoftmaxBlocks(Var, Rc<Vec<bool>>),
    WeightedSumBlocks(Var, Var),
    Conv1dTime {
        x: Var,
        w: Var,
        batch: usize,
        kernel: usize,
    },
    ScaleRows(Var, Rc<Vec<f64>>),
    MulConst(Var, Rc<Tensor>),
    MdnNll {
        logits: Var,
        means: Var,
        log_sigmas: Var,
        target: Rc<Tensor>,
        weights: Rc<Vec<f64>>,
    },
    MdnSelect {
        logits: Var,
        means: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    },
    L1 {
        x: Var,
        target: Rc<Tensor>,
        weights: Rc<Vec<f64>>,
    },
    BceLogits {
        x: Var,
        targets: Rc<Vec<f64>>,
        weights: Rc<Vec<f64>>,
    },
    Combine(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Tensor>, rows: usize, cols: usize) -> &mut Tensor {
    slot.get_or_insert_with(|| Tensor::zeros(rows, cols))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`; later `Var`s become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[1 x n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias shape mismatch");
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..rows {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(&bv) {
            *o *= x;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        self.push(out, Op::Affine(a, scale), &[a])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat row mismatch");
            let c = v.cols();
            for i in 0..rows {
                out.row_mut(i)[off..off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a);
        assert!(start <= end && end <= v.cols(), "slice out of range");
        let mut out = Tensor::zeros(v.rows(), end - start);
        for i in 0..v.rows() {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(idx.len(), v.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(v.row(i));
        }
        self.push(out, Op::GatherRows(a, idx), &[a])
    }

    /// Interleaves per-step `[B x n]` tensors into a sample-major `[B*T x n]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Var {
        let t_len = steps.len();
        let (b, n) = self.shape(steps[0]);
        let mut out = Tensor::zeros(b * t_len, n);
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            for i in 0..b {
                out.row_mut(i * t_len + t).copy_from_slice(v.row(i));
            }
        }
        self.push(out, Op::StackSteps(steps.to_vec()), steps)
    }

    /// `[B x n]` to `[B*T x n]`, repeating each row `T` times.
    pub fn repeat_blocks(&mut self, a: Var, t_len: usize) -> Var {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows() * t_len, v.cols());
        for b in 0..v.rows() {
            for t in 0..t_len {
                out.row_mut(b * t_len + t).copy_from_slice(v.row(b));
            }
        }
        self.push(out, Op::RepeatBlocks(a, t_len), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Softmax over each sample's block of `T` scores (`[B*T x 1]` in,
    /// `[B x T]` out). Masked-out positions get probability 0.
    pub fn masked_softmax_blocks(&mut self, scores: Var, mask: Rc<Vec<bool>>, batch: usize) -> Var {
        let v = self.value(scores);
        assert_eq!(v.cols(), 1);
        let n = v.rows();
        assert_eq!(mask.len(), n);
        assert_eq!(n % batch, 0);
        let t_len = n / batch;
        let mut out = Tensor::zeros(batch, t_len);
        for b in 0..batch {
            let row = &v.data()[b * t_len..(b + 1) * t_len];
            let m = &mask[b * t_len..(b + 1) * t_len];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_mut(b);
            let mut z = 0.0;
            for t in 0..t_len {
                if m[t] {
                    o[t] = (row[t] - max).exp();
                    z += o[t];
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::MaskedSoftmaxBlocks(scores, mask), &[scores])
    }

    /// `out[b] = sum_t w[b, t] * m[b*T + t]`.
    pub fn weighted_sum_blocks(&mut self, w: Var, m: Var) -> Var {
        let (batch, t_len) = self.shape(w);
        let mv = self.value(m);
        assert_eq!(mv.rows(), batch * t_len, "memory rows do not match weights");
        let wv = self.value(w);
        let mut out = Tensor::zeros(batch, mv.cols());
        for b in 0..batch {
            let o = out.row_mut(b);
            for t in 0..t_len {
                let wt = wv.get(b, t);
                if wt == 0.0 {
                    continue;
                }
                for (x, y) in o.iter_mut().zip(mv.row(b * t_len + t)) {
                    *x += wt * y;
                }
            }
        }
        self.push(out, Op::WeightedSumBlocks(w, m), &[w, m])
    }

    /// 1-D convolution along time within each sample, zero padded, odd kernel.
    /// `x` is `[B*T x C_in]`, `w` is `[C_out x kernel*C_in]`.
    pub fn conv1d_time(&mut self, x: Var, w: Var, batch: usize, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let xv = self.value(x);
        let c_in = xv.cols();
        assert_eq!(self.shape(w).1, kernel * c_in, "conv weight shape mismatch");
        let cols = im2col(xv, batch, kernel);
        let mut out = Tensor::zeros(xv.rows(), self.shape(w).0);
        gemm(1.0, &cols, false, self.value(w), true, 0.0, &mut out);
        self.push(
            out,
            Op::Conv1dTime {
                x,
                w,
                batch,
                kernel,
            },
            &[x, w],
        )
    }

    pub fn scale_rows(&mut self, a: Var, scale: Rc<Vec<f64>>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(scale.len(), out.rows());
        for (i, &s) in scale.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        self.push(out, Op::ScaleRows(a, scale), &[a])
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Var {
        assert_eq!(self.shape(a), c.shape());
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= x;
        }
        self.push(out, Op::MulConst(a, c), &[a])
    }

    /// `sum_i weights[i] * nll_i` over mixture rows. Rows with weight 0 are skipped.
    pub fn mdn_nll(
        &mut self,
        logits: Var,
        means: Var,
        log_sigmas: Var,
        target: Rc<Tensor>,
        weights: Rc<Vec<f64>>,
    ) -> Var {
        let (lv, mv, sv) = (
            self.value(logits),
            self.value(means),
            self.value(log_sigmas),
        );
        let n = lv.rows();
        assert_eq!(target.rows(), n);
        assert_eq!(mv.cols(), lv.cols() * target.cols());
        assert_eq!(mv.shape(), sv.shape());
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] != 0.0 {
                total += weights[i] * row_nll(lv.row(i), mv.row(i), sv.row(i), target.row(i), None);
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::MdnNll {
                logits,
                means,
                log_sigmas,
                target,
                weights,
            },
            &[logits, means, log_sigmas],
        )
    }

    /// Per row, the means of the component with the largest logit.
    pub fn mdn_select(&mut self, logits: Var, means: Var) -> Var {
        let (lv, mv) = (self.value(logits), self.value(means));
        let k = lv.cols();
        let d = mv.cols() / k;
        let mut out = Tensor::zeros(lv.rows(), d);
        for i in 0..lv.rows() {
            let c = argmax(lv.row(i));
            out.row_mut(i)
                .copy_from_slice(&mv.row(i)[c * d..(c + 1) * d]);
        }
        self.push(out, Op::MdnSelect { logits, means }, &[logits, means])
    }

    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows());
        let mut total = 0.0;
        for i in 0..lv.rows() {
            if weights[i] != 0.0 {
                let row = lv.row(i);
                total += weights[i] * (logsumexp(row) - row[targets[i]]);
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            },
            &[logits],
        )
    }

    /// `sum_i weights[i] * sum_d |x - target|`.
    pub fn l1(&mut self, x: Var, target: Rc<Tensor>, weights: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape());
        let mut total = 0.0;
        for i in 0..xv.rows() {
            if weights[i] != 0.0 {
                let s: f64 = xv
                    .row(i)
                    .iter()
                    .zip(target.row(i))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                total += weights[i] * s;
            }
        }
        self.push(Tensor::scalar(total), Op::L1 { x, target, weights }, &[x])
    }

    pub fn bce_logits(&mut self, x: Var, targets: Rc<Vec<f64>>, weights: Rc<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1);
        let mut total = 0.0;
        for i in 0..xv.rows() {
            if weights[i] != 0.0 {
                total += weights[i] * bce_with_logit(xv.data()[i], targets[i]);
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                x,
                targets,
                weights,
            },
            &[x],
        )
    }

    /// Weighted sum of scalars.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::Combine(terms.to_vec()), &parents)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut Tensor {
        let (r, c) = self.shape(v);
        accumulate(&mut grads[v.0], r, c)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    gemm(1.0, g, false, bv, true, 1.0, self.slot(grads, *a));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    gemm(1.0, av, true, g, false, 1.0, self.slot(grads, *b));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        self.slot(grads, v).add_assign(g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    self.slot(grads, *a).add_assign(g);
                }
                if self.wants(*bias) {
                    let gb = self.slot(grads, *bias);
                    for i in 0..g.rows() {
                        for (x, y) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let ov = self.value(other).data().to_vec();
                        let gv = self.slot(grads, v);
                        for ((x, gi), o) in gv.data_mut().iter_mut().zip(g.data()).zip(&ov) {
                            *x += gi * o;
                        }
                    }
                }
            }
            Op::Affine(a, s) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += s * gi;
                    }
                }
            }
            Op::Sigmoid(a) => self.unary_back(*a, g, &node.value, grads, |y| y * (1.0 - y)),
            Op::Tanh(a) => self.unary_back(*a, g, &node.value, grads, |y| 1.0 - y * y),
            Op::Relu(a) => {
                self.unary_back(
                    *a,
                    g,
                    &node.value,
                    grads,
                    |y| if y > 0.0 { 1.0 } else { 0.0 },
                )
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.wants(p) {
                        let gp = self.slot(grads, p);
                        for i in 0..g.rows() {
                            for (x, y) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + c]) {
                                *x += y;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for i in 0..g.rows() {
                        for (x, y) in ga.row_mut(i)[*start..*start + g.cols()]
                            .iter_mut()
                            .zip(g.row(i))
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (o, &i) in idx.iter().enumerate() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::StackSteps(steps) => {
                let t_len = steps.len();
                for (t, &s) in steps.iter().enumerate() {
                    if self.wants(s) {
                        let gs = self.slot(grads, s);
                        for b in 0..gs.rows() {
                            for (x, y) in gs.row_mut(b).iter_mut().zip(g.row(b * t_len + t)) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::RepeatBlocks(a, t_len) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for b in 0..ga.rows() {
                        for t in 0..*t_len {
                            for (x, y) in ga.row_mut(b).iter_mut().zip(g.row(b * t_len + t)) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (x, y) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
            Op::MaskedSoftmaxBlocks(scores, mask) => {
                if self.wants(*scores) {
                    let y = &node.value;
                    let (batch, t_len) = y.shape();
                    let gs = self.slot(grads, *scores);
                    for b in 0..batch {
                        let yr = y.row(b);
                        let gr = g.row(b);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for t in 0..t_len {
                            if mask[b * t_len + t] {
                                gs.data_mut()[b * t_len + t] += yr[t] * (gr[t] - dot);
                            }
                        }
                    }
                }
            }
            Op::WeightedSumBlocks(w, m) => {
                let wv = self.value(*w);
                let mv = self.value(*m);
                let (batch, t_len) = wv.shape();
                if self.wants(*w) {
                    let gw = self.slot(grads, *w);
                    for b in 0..batch {
                        for t in 0..t_len {
                            let d: f64 = g
                                .row(b)
                                .iter()
                                .zip(mv.row(b * t_len + t))
                                .map(|(p, q)| p * q)
                                .sum();
                            gw.data_mut()[b * t_len + t] += d;
                        }
                    }
                }
                if self.wants(*m) {
                    let gm = self.slot(grads, *m);
                    for b in 0..batch {
                        for t in 0..t_len {
                            let wt = wv.get(b, t);
                            if wt == 0.0 {
                                continue;
                            }
                            for (x, y) in gm.row_mut(b * t_len + t).iter_mut().zip(g.row(b)) {
                                *x += wt * y;
                            }
                        }
                    }
                }
            }
            Op::Conv1dTime {
                x,
                w,
                batch,
                kernel,
            } => {
                let xv = self.value(*x);
                if self.wants(*w) {
                    let cols = im2col(xv, *batch, *kernel);
                    gemm(1.0, g, true, &cols, false, 1.0, self.slot(grads, *w));
                }
                if self.wants(*x) {
                    let mut gcols = Tensor::zeros(xv.rows(), kernel * xv.cols());
                    gemm(1.0, g, false, self.value(*w), false, 0.0, &mut gcols);
                    col2im_add(&gcols, *batch, *kernel, self.slot(grads, *x));
                }
            }
            Op::ScaleRows(a, scale) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (i, &s) in scale.iter().enumerate() {
                        for (x, y) in ga.row_mut(i).iter_mut().zip(g.row(i)) {
                            *x += s * y;
                        }
                    }
                }
            }
            Op::MulConst(a, c) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for ((x, y), m) in ga.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                        *x += y * m;
                    }
                }
            }
            Op::MdnNll {
                logits,
                means,
                log_sigmas,
                target,
                weights,
            } => {
                let gs = g.item();
                let (lv, mv, sv) = (
                    self.value(*logits),
                    self.value(*means),
                    self.value(*log_sigmas),
                );
                let mut gl = Tensor::zeros(lv.rows(), lv.cols());
                let mut gm = Tensor::zeros(mv.rows(), mv.cols());
                let mut gsig = Tensor::zeros(sv.rows(), sv.cols());
                for i in 0..lv.rows() {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let rg = RowGrad {
                        logits: gl.row_mut(i),
                        means: gm.row_mut(i),
                        log_sigmas: gsig.row_mut(i),
                        scale: gs * weights[i],
                    };
                    row_nll(lv.row(i), mv.row(i), sv.row(i), target.row(i), Some(rg));
                }
                for (v, t) in [(*logits, gl), (*means, gm), (*log_sigmas, gsig)] {
                    if self.wants(v) {
                        self.slot(grads, v).add_assign(&t);
                    }
                }
            }
            Op::MdnSelect { logits, means } => {
                if self.wants(*means) {
                    let lv = self.value(*logits);
                    let k = lv.cols();
                    let d = g.cols();
                    debug_assert_eq!(self.shape(*means).1, k * d);
                    let gm = self.slot(grads, *means);
                    for i in 0..g.rows() {
                        let c = argmax(lv.row(i));
                        for (x, y) in gm.row_mut(i)[c * d..(c + 1) * d].iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                if self.wants(*logits) {
                    let gs = g.item();
                    let lv = self.value(*logits);
                    let mut p = vec![0.0; lv.cols()];
                    let gl = self.slot(grads, *logits);
                    for i in 0..lv.rows() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        softmax_into(lv.row(i), &mut p);
                        p[targets[i]] -= 1.0;
                        for (x, q) in gl.row_mut(i).iter_mut().zip(&p) {
                            *x += gs * weights[i] * q;
                        }
                    }
                }
            }
            Op::L1 { x, target, weights } => {
                if self.wants(*x) {
                    let gs = g.item();
                    let xv = self.value(*x);
                    let gx = self.slot(grads, *x);
                    for i in 0..xv.rows() {
                        if weights[i] == 0.0 {
                            continue;
                        }
                        for ((o, a), b) in
                            gx.row_mut(i).iter_mut().zip(xv.row(i)).zip(target.row(i))
                        {
                            let s = if a > b {
                                1.0
                            } else if a < b {
                                -1.0
                            } else {
                                0.0
                            };
                            *o += gs * weights[i] * s;
                        }
                    }
                }
            }
            Op::BceLogits {
                x,
                targets,
                weights,
            } => {
                if self.wants(*x) {
                    let gs = g.item();
                    let xv = self.value(*x).data().to_vec();
                    let gx = self.slot(grads, *x);
                    for i in 0..xv.len() {
                        if weights[i] != 0.0 {
                            gx.data_mut()[i] += gs * weights[i] * (sigmoid(xv[i]) - targets[i]);
                        }
                    }
                }
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        self.slot(grads, v).data_mut()[0] += c * g.item();
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        a: Var,
        g: &Tensor,
        y: &Tensor,
        grads: &mut [Option<Tensor>],
        deriv: impl Fn(f64) -> f64,
    ) {
        if self.wants(a) {
            let ga = self.slot(grads, a);
            for ((x, gi), yi) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                *x += gi * deriv(*yi);
            }
        }
    }
}

/// Per-sample validity mask in sample-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    pub batch: usize,
    pub steps: usize,
    pub lens: Vec<usize>,
}

impl BlockMask {
    pub fn new(lens: Vec<usize>) -> Self {
        let steps = lens.iter().copied().max().unwrap_or(0);
        BlockMask {
            batch: lens.len(),
            steps,
            lens,
        }
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut out = vec![false; self.batch * self.steps];
        for (b, &l) in self.lens.iter().enumerate() {
            for t in 0..l {
                out[b * self.steps + t] = true;
            }
        }
        out
    }

    /// Per-row weights summing to one over all valid rows.
    pub fn mean_weights(&self) -> Vec<f64> {
        let total: usize = self.lens.iter().sum();
        let w = if total == 0 { 0.0 } else { 1.0 / total as f64 };
        self.flags()
            .into_iter()
            .map(|f| if f { w } else { 0.0 })
            .collect()
    }

    pub fn row_scale(&self) -> Vec<f64> {
        self.flags()
            .into_iter()
            .map(|f| if f { 1.0 } else { 0.0 })
            .collect()
    }

    /// Row indices of step `t` across the batch.
    pub fn step_rows(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.steps + t).collect()
    }
}

fn im2col(x: &Tensor, batch: usize, kernel: usize) -> Tensor {
    let (rows, c_in) = x.shape();
    let t_len = rows / batch;
    let half = kernel / 2;
    let mut cols = Tensor::zeros(rows, kernel * c_in);
    for b in 0..batch {
        for t in 0..t_len {
            let dst = cols.row_mut(b * t_len + t);
            for j in 0..kernel {
                let src_t = t as isize + j as isize - half as isize;
                if src_t < 0 || src_t >= t_len as isize {
                    continue;
                }
                dst[j * c_in..(j + 1) * c_in].copy_from_slice(x.row(b * t_len + src_t as usize));
            }
        }
    }
    cols
}

fn col2im_add(cols: &Tensor, batch: usize, kernel: usize, gx: &mut Tensor) {
    let (rows, c_in) = gx.shape();
    let t_len = rows / batch;
    let half = kernel / 2;
    for b in 0..batch {
        for t in 0..t_len {
            let src = cols.row(b * t_len + t);
            for j in 0..kernel {
                let dst_t = t as isize + j as isize - half as isize;
                if dst_t < 0 || dst_t >= t_len as isize {
                    continue;
                }
                let dst = gx.row_mut(b * t_len + dst_t as usize);
                for (x, y) in dst.iter_mut().zip(&src[j * c_in..(j + 1) * c_in]) {
                    *x += y;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(
            r,
            c,
            (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central-difference check of every input coordinate of a scalar graph.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
            let out = build(&mut g, &vs);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vs);
        let grads = g.backward(out);
        let h = 1e-5;
        for (n, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vs[n])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
            for i in 0..x.len() {
                let mut plus = inputs.clone();
                plus[n].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[n].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[i];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                    "input {n} coord {i}: fd {fd} analytic {an}"
                );
            }
        }
    }

    fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
        // Reduces any tensor to a scalar with fixed random weights.
        let (r, c) = g.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(rand_tensor(&mut rng, c, 1));
        let col = g.matmul(v, w);
        let ones = g.constant(Tensor::filled(1, r, 1.0));
        g.matmul(ones, col)
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let bias = rand_tensor(&mut rng, 1, 2);
        check(vec![a, b, bias], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let m = g.add_row(m, v[2]);
            let s = g.sigmoid(m);
            let t = g.tanh(m);
            let p = g.mul(s, t);
            let q = g.affine(p, 2.5, 0.3);
            let r = g.relu(m);
            let d = g.sub(q, r);
            weighted_sum(g, d, 7)
        });
    }

    #[test]
    fn layout_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, 6, 3);
        let b = rand_tensor(&mut rng, 2, 3);
        check(vec![a, b], |g, v| {
            let c = g.concat_cols(&[v[0], v[0]]);
            let s = g.slice_cols(c, 2, 5);
            let gathered = g.gather_rows(s, Rc::new(vec![0, 3, 5, 3]));
            let r = g.reshape(gathered, 2, 6);
            let st = g.stack_steps(&[v[1], v[1], v[1]]);
            let rep = g.repeat_blocks(v[1], 3);
            let sum = g.add(st, rep);
            let x = g.scale_rows(sum, Rc::new(vec![1.0, 0.5, 0.0, 2.0, 1.0, -1.0]));
            let y = g.mul_const(x, Rc::new(Tensor::filled(6, 3, 0.7)));
            let l = weighted_sum(g, y, 3);
            let m = weighted_sum(g, r, 4);
            g.combine(&[(l, 1.0), (m, -0.5)])
        });
    }

    #[test]
    fn attention_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores = rand_tensor(&mut rng, 8, 1);
        let memory = rand_tensor(&mut rng, 8, 3);
        let w = rand_tensor(&mut rng, 2, 3);
        let mask = Rc::new(vec![true, true, true, false, true, true, true, true]);
        check(vec![scores, memory, w], move |g, v| {
            let p = g.masked_softmax_blocks(v[0], mask.clone(), 2);
            let ctx = g.weighted_sum_blocks(p, v[1]);
            let flat = g.reshape(p, 8, 1);
            let conv = g.conv1d_time(flat, v[2], 2, 3);
            let a = weighted_sum(g, ctx, 5);
            let b = weighted_sum(g, conv, 6);
            g.combine(&[(a, 1.0), (b, 1.0)])
        });
    }

    #[test]
    fn masked_softmax_rows_are_distributions() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_vec(6, 1, vec![0.1, 5.0, -3.0, 2.0, 2.0, 9.0]));
        let p = g.masked_softmax_blocks(s, Rc::new(vec![true, true, true, true, true, false]), 2);
        let v = g.value(p);
        for b in 0..2 {
            assert!((v.row(b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(v.get(1, 2), 0.0);
    }

    #[test]
    fn conv_gradients_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 10, 3);
        let w = rand_tensor(&mut rng, 4, 5 * 3);
        check(vec![x, w], |g, v| {
            let y = g.conv1d_time(v[0], v[1], 2, 5);
            weighted_sum(g, y, 9)
        });
    }

    #[test]
    fn conv_gradients_wide_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 8, 6);
        let w = rand_tensor(&mut rng, 3, 3 * 6);
        check(vec![x, w], |g, v| {
            let y = g.conv1d_time(v[0], v[1], 2, 3);
            weighted_sum(g, y, 10)
        });
    }

    #[test]
    fn conv_respects_sample_boundaries() {
        // Sample 1 must not see sample 0's frames.
        let mut g = Graph::new();
        let mut x = Tensor::zeros(6, 1);
        x.data_mut()[..3].copy_from_slice(&[1.0, 2.0, 3.0]);
        let xv = g.constant(x);
        let w = g.constant(Tensor::from_vec(1, 3, vec![1.0, 1.0, 1.0]));
        let y = g.conv1d_time(xv, w, 2, 3);
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn loss_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, k, d) = (4, 2, 3);
        let logits = rand_tensor(&mut rng, n, k);
        let means = rand_tensor(&mut rng, n, k * d);
        let log_sigmas = rand_tensor(&mut rng, n, k * d).map(|v| 0.3 * v);
        let target = Rc::new(rand_tensor(&mut rng, n, d));
        let cls = rand_tensor(&mut rng, n, 5);
        let weights = Rc::new(vec![0.25, 0.5, 0.0, 0.25]);
        check(vec![logits, means, log_sigmas, cls], move |g, v| {
            let nll = g.mdn_nll(v[0], v[1], v[2], target.clone(), weights.clone());
            let sel = g.mdn_select(v[0], v[1]);
            let l1 = g.l1(sel, target.clone(), weights.clone());
            let ce = g.cross_entropy(v[3], Rc::new(vec![0, 4, 2, 1]), weights.clone());
            let stop = g.slice_cols(v[3], 0, 1);
            let bce = g.bce_logits(stop, Rc::new(vec![0.0, 0.0, 1.0, 1.0]), weights.clone());
            g.combine(&[(nll, 1.0), (l1, 0.7), (ce, 0.3), (bce, 1.1)])
        });
    }

    #[test]
    fn zero_weight_rows_get_zero_gradient() {
        let mut g = Graph::new();
        let logits = g.param(Tensor::from_vec(2, 1, vec![0.0, 0.0]));
        let means = g.param(Tensor::from_vec(2, 1, vec![0.5, f64::NAN]));
        let ls = g.param(Tensor::zeros(2, 1));
        let target = Rc::new(Tensor::from_vec(2, 1, vec![0.0, 0.0]));
        let loss = g.mdn_nll(logits, means, ls, target, Rc::new(vec![1.0, 0.0]));
        assert!(g.value(loss).item().is_finite());
        let grads = g.backward(loss);
        assert_eq!(grads.get(means).unwrap().data()[1], 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(2, 2, 1.0));
        let p = g.param(Tensor::filled(2, 2, 2.0));
        let m = g.mul(c, p);
        let loss = weighted_sum(&mut g, m, 1);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(p).is_some());
    }
}
