//! Reverse-mode recording backend.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{fwd, Graph, Spans};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Concat(Vec<usize>),
    Gather(usize, Vec<usize>),
    Scatter(usize, Vec<usize>),
    SpanMean(usize, Spans),
    SpanScores(usize, usize, Spans),
    SpanSoftmax(usize, Spans),
    SpanWeightedSum(usize, usize, Spans),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Dropout(usize, Vec<f64>),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        student: usize,
        p: Vec<f64>,
        q: Vec<f64>,
        tau: f64,
    },
    Mse {
        pred: usize,
        target: Tensor,
        rows: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients from one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a recorded variable, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulated gradient for a parameter, if it was reached.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    #[cfg(test)]
    pub(crate) fn with_param(&self, id: ParamId, g: Vec<f64>) -> Gradients {
        let mut params = self.params.clone();
        params.retain(|(p, _)| *p != id);
        params.push((id, g));
        Gradients {
            nodes: self.nodes.clone(),
            params,
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape with training-mode behaviour off (dropout is identity).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// An input that receives a gradient (used for input-gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("variable"));
        }
        Ok(self.push(t, Op::Leaf, true))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Runs the reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut params: Vec<(ParamId, Vec<f64>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Vec<(ParamId, Vec<f64>)>,
    ) {
        let nodes = &self.nodes;
        // Returns the accumulator for input `j`, or None if it needs no gradient.
        macro_rules! acc {
            ($j:expr) => {{
                let j: usize = $j;
                if nodes[j].needs_grad {
                    let n = nodes[j].value.numel();
                    Some(grads[j].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => kernels::axpy(1.0, g, acc),
                    None => params.push((*id, g.to_vec())),
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = acc!(*a) {
                    kernels::gemm(false, true, m, n, k, g, bv.data(), 1.0, ga);
                }
                if let Some(gb) = acc!(*b) {
                    kernels::gemm(true, false, k, m, n, av.data(), g, 1.0, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = acc!(*a) {
                    kernels::gemm(false, false, m, n, k, g, bv.data(), 1.0, ga);
                }
                if let Some(gb) = acc!(*b) {
                    kernels::gemm(true, false, n, m, k, g, av.data(), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    kernels::axpy(1.0, g, ga);
                }
                if let Some(gb) = acc!(*b) {
                    kernels::axpy(1.0, g, gb);
                }
            }
            Op::AddRow(a, r) => {
                if let Some(ga) = acc!(*a) {
                    kernels::axpy(1.0, g, ga);
                }
                let n = nodes[*r].value.numel();
                if let Some(gr) = acc!(*r) {
                    for row in g.chunks(n) {
                        kernels::axpy(1.0, row, gr);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = acc!(*a) {
                    kernels::axpy(*s, g, ga);
                }
            }
            Op::Concat(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if let Some(gp) = acc!(p) {
                        for r in 0..m {
                            kernels::axpy(
                                1.0,
                                &g[r * total + col..r * total + col + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::Gather(src, idx) => {
                let d = node.value.cols();
                if let Some(gs) = acc!(*src) {
                    for (i, &r) in idx.iter().enumerate() {
                        kernels::axpy(1.0, &g[i * d..(i + 1) * d], &mut gs[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Scatter(src, idx) => {
                let d = node.value.cols();
                if let Some(gs) = acc!(*src) {
                    for (i, &r) in idx.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gs[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SpanMean(x, spans) => {
                let d = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for j in 0..spans.len() {
                        let len = spans.span_len(j);
                        let s = spans.start(j);
                        let gj = &g[j * d..(j + 1) * d];
                        let inv = 1.0 / len as f64;
                        for r in s..s + len {
                            kernels::axpy(inv, gj, &mut gx[r * d..(r + 1) * d]);
                        }
                    }
                }
            }
            Op::SpanScores(q, k, spans) => {
                let (qv, kv) = (&nodes[*q].value, &nodes[*k].value);
                let d = qv.cols();
                if let Some(gq) = acc!(*q) {
                    for j in 0..spans.len() {
                        let s = spans.start(j);
                        let off = spans.offset(j);
                        let gqj = &mut gq[j * d..(j + 1) * d];
                        for r in 0..spans.span_len(j) {
                            kernels::axpy(g[off + r], kv.row_slice(s + r), gqj);
                        }
                    }
                }
                if let Some(gk) = acc!(*k) {
                    for j in 0..spans.len() {
                        let s = spans.start(j);
                        let off = spans.offset(j);
                        let qj = qv.row_slice(j);
                        for r in 0..spans.span_len(j) {
                            let row = s + r;
                            kernels::axpy(g[off + r], qj, &mut gk[row * d..(row + 1) * d]);
                        }
                    }
                }
            }
            Op::SpanSoftmax(x, spans) => {
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for j in 0..spans.len() {
                        let (a, b) = (spans.offset(j), spans.offset(j + 1));
                        let dotp = kernels::dot(&y[a..b], &g[a..b]);
                        for i in a..b {
                            gx[i] += y[i] * (g[i] - dotp);
                        }
                    }
                }
            }
            Op::SpanWeightedSum(k, w, spans) => {
                let (kv, wv) = (&nodes[*k].value, &nodes[*w].value);
                let d = kv.cols();
                if let Some(gk) = acc!(*k) {
                    for j in 0..spans.len() {
                        let s = spans.start(j);
                        let off = spans.offset(j);
                        let gj = &g[j * d..(j + 1) * d];
                        for r in 0..spans.span_len(j) {
                            let row = s + r;
                            kernels::axpy(wv.data()[off + r], gj, &mut gk[row * d..(row + 1) * d]);
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for j in 0..spans.len() {
                        let s = spans.start(j);
                        let off = spans.offset(j);
                        let gj = &g[j * d..(j + 1) * d];
                        for r in 0..spans.span_len(j) {
                            gw[off + r] += kernels::dot(gj, kv.row_slice(s + r));
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gv = nodes[*gain].value.data().to_vec();
                if let Some(gb) = acc!(*bias) {
                    for row in g.chunks(n) {
                        kernels::axpy(1.0, row, gb);
                    }
                }
                if let Some(gg) = acc!(*gain) {
                    for r in 0..m {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let nf = n as f64;
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            mean_gh += gh;
                            mean_ghx += gh * xr[j];
                        }
                        mean_gh /= nf;
                        mean_ghx /= nf;
                        for j in 0..n {
                            let gh = gr[j] * gv[j];
                            gx[r * n + j] += rstd[r] * (gh - mean_gh - xr[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(gx) = acc!(*x) {
                    for (r, (yr, gr)) in y.chunks(n).zip(g.chunks(n)).enumerate() {
                        let dotp = kernels::dot(yr, gr);
                        for j in 0..n {
                            gx[r * n + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = nodes[*x].value.data();
                if let Some(gx) = acc!(*x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = nodes[*x].value.data();
                if let Some(gx) = acc!(*x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = acc!(*x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = acc!(*x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = nodes[*logits].value.cols();
                if let Some(gl) = acc!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            gl[r * c + j] += g[0] * probs[r * c + j];
                        }
                        gl[r * c + t] -= g[0];
                    }
                }
            }
            Op::KlDiv { student, p, q, tau } => {
                if let Some(gs) = acc!(*student) {
                    for i in 0..gs.len() {
                        gs[i] += g[0] * tau * (q[i] - p[i]);
                    }
                }
            }
            Op::Mse { pred, target, rows } => {
                let pv = &nodes[*pred].value;
                let d = pv.cols();
                let scale = 2.0 * g[0] / (rows.len() * d) as f64;
                if let Some(gp) = acc!(*pred) {
                    for &r in rows {
                        for j in 0..d {
                            gp[r * d + j] += scale * (pv.get(r, j) - target.get(r, j));
                        }
                    }
                }
            }
        }
    }
}

impl Graph for Tape {
    type Var = Var;

    fn is_training(&self) -> bool {
        self.training
    }

    fn constant(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite("constant"));
        }
        Ok(self.push(t, Op::Leaf, false))
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = fwd::matmul(self.val(*a), self.val(*b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(y, Op::MatMul(a.0, b.0), ng))
    }

    fn matmul_bt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = fwd::matmul_bt(self.val(*a), self.val(*b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(y, Op::MatMulBt(a.0, b.0), ng))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = fwd::add(self.val(*a), self.val(*b))?;
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(y, Op::Add(a.0, b.0), ng))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let y = fwd::add_row(self.val(*a), self.val(*row))?;
        let ng = self.ng(&[a.0, row.0]);
        Ok(self.push(y, Op::AddRow(a.0, row.0), ng))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Result<Var> {
        let y = fwd::scale(self.val(*a), s)?;
        let ng = self.ng(&[a.0]);
        Ok(self.push(y, Op::Scale(a.0, s), ng))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let y = fwd::concat_cols(&vals)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(y, Op::Concat(ids), ng))
    }

    fn gather_rows(&mut self, src: &Var, idx: &[usize]) -> Result<Var> {
        let y = fwd::gather_rows(self.val(*src), idx)?;
        let ng = self.ng(&[src.0]);
        Ok(self.push(y, Op::Gather(src.0, idx.to_vec()), ng))
    }

    fn scatter_rows(&mut self, src: &Var, idx: &[usize], rows: usize) -> Result<Var> {
        let y = fwd::scatter_rows(self.val(*src), idx, rows)?;
        let ng = self.ng(&[src.0]);
        Ok(self.push(y, Op::Scatter(src.0, idx.to_vec()), ng))
    }

    fn span_mean(&mut self, x: &Var, spans: &Spans) -> Result<Var> {
        let y = fwd::span_mean(self.val(*x), spans)?;
        let ng = self.ng(&[x.0]);
        Ok(self.push(y, Op::SpanMean(x.0, spans.clone()), ng))
    }

    fn span_scores(&mut self, q: &Var, keys: &Var, spans: &Spans) -> Result<Var> {
        let y = fwd::span_scores(self.val(*q), self.val(*keys), spans)?;
        let ng = self.ng(&[q.0, keys.0]);
        Ok(self.push(y, Op::SpanScores(q.0, keys.0, spans.clone()), ng))
    }

    fn span_softmax(&mut self, scores: &Var, spans: &Spans) -> Result<Var> {
        let y = fwd::span_softmax(self.val(*scores), spans)?;
        let ng = self.ng(&[scores.0]);
        Ok(self.push(y, Op::SpanSoftmax(scores.0, spans.clone()), ng))
    }

    fn span_weighted_sum(&mut self, keys: &Var, w: &Var, spans: &Spans) -> Result<Var> {
        let y = fwd::span_weighted_sum(self.val(*keys), self.val(*w), spans)?;
        let ng = self.ng(&[keys.0, w.0]);
        Ok(self.push(y, Op::SpanWeightedSum(keys.0, w.0, spans.clone()), ng))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (y, xhat, rstd) = fwd::layer_norm(self.val(*x), self.val(*gain), self.val(*bias))?;
        let ng = self.ng(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    fn softmax(&mut self, x: &Var) -> Result<Var> {
        let y = fwd::softmax(self.val(*x))?;
        let ng = self.ng(&[x.0]);
        Ok(self.push(y, Op::Softmax(x.0), ng))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        let y = fwd::map(self.val(*x), |v| v.max(0.0));
        let ng = self.ng(&[x.0]);
        Ok(self.push(y, Op::Relu(x.0), ng))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let y = fwd::map(self.val(*x), kernels::gelu);
        let ng = self.ng(&[x.0]);
        Ok(self.push(y, Op::Gelu(x.0), ng))
    }

    fn tanh(&mut self, x: &Var) -> Result<Var> {
        let y = fwd::map(self.val(*x), f64::tanh);
        let ng = self.ng(&[x.0]);
        Ok(self.push(y, Op::Tanh(x.0), ng))
    }

    fn dropout(&mut self, x: &Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(*x);
        }
        let n = self.val(*x).numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.val(*x);
        let data: Vec<f64> = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(&[x.0]);
        Ok(self.push(y, Op::Dropout(x.0, mask), ng))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(self.val(*x).data().iter().sum());
        let ng = self.ng(&[x.0]);
        Ok(self.push(y, Op::Sum(x.0), ng))
    }

    fn cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let (y, probs) = fwd::cross_entropy(self.val(*logits), targets)?;
        let ng = self.ng(&[logits.0]);
        Ok(self.push(
            y,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    fn kl_div(&mut self, student: &Var, teacher: &Tensor, tau: f64) -> Result<Var> {
        let (y, p, q) = fwd::kl_div(self.val(*student), teacher, tau)?;
        let ng = self.ng(&[student.0]);
        Ok(self.push(
            y,
            Op::KlDiv {
                student: student.0,
                p,
                q,
                tau,
            },
            ng,
        ))
    }

    fn mse(&mut self, pred: &Var, target: &Tensor, rows: &[usize]) -> Result<Var> {
        let y = fwd::mse(self.val(*pred), target, rows)?;
        let ng = self.ng(&[pred.0]);
        Ok(self.push(
            y,
            Op::Mse {
                pred: pred.0,
                target: target.clone(),
                rows: rows.to_vec(),
            },
            ng,
        ))
    }
}
