//! Differentiable-op interface shared by the recording [`Tape`](crate::tape::Tape)
//! and the non-recording [`Eval`] backend.
//!
//! Model code is written once against [`Graph`]; training runs it on a tape,
//! inference runs it on `Eval`. Both backends call the same forward routines
//! in [`fwd`], so their outputs are bitwise identical.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Logit value standing in for minus infinity at masked positions.
pub const MASKED_LOGIT: f64 = -1e30;

pub(crate) fn is_masked(v: f64) -> bool {
    v <= MASKED_LOGIT * 0.5
}

/// Ragged row ranges: query `j` reads rows `start_j .. start_j + len_j`.
///
/// Several queries may read the same range (per-beam attention over one
/// user's encoder states).
#[derive(Clone, Debug)]
pub struct Spans(Arc<SpansInner>);

#[derive(Debug)]
struct SpansInner {
    starts: Vec<usize>,
    lens: Vec<usize>,
    offsets: Vec<usize>,
    end: usize,
}

impl Spans {
    pub fn new(starts: Vec<usize>, lens: Vec<usize>) -> Result<Self> {
        if starts.len() != lens.len() {
            return Err(Error::invalid("spans: starts/lens length differ"));
        }
        if let Some(j) = lens.iter().position(|&l| l == 0) {
            return Err(Error::invalid(format!("spans: span {j} is empty")));
        }
        let mut offsets = Vec::with_capacity(lens.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &l in &lens {
            acc += l;
            offsets.push(acc);
        }
        let end = starts
            .iter()
            .zip(&lens)
            .map(|(s, l)| s + l)
            .max()
            .unwrap_or(0);
        Ok(Spans(Arc::new(SpansInner {
            starts,
            lens,
            offsets,
            end,
        })))
    }

    /// Back-to-back spans covering `0 .. sum(lens)`.
    pub fn contiguous(lens: &[usize]) -> Result<Self> {
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in lens {
            starts.push(acc);
            acc += l;
        }
        Spans::new(starts, lens.to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.lens.is_empty()
    }

    /// Total ragged length (sum of span lengths).
    pub fn total(&self) -> usize {
        *self.0.offsets.last().unwrap()
    }

    pub fn start(&self, j: usize) -> usize {
        self.0.starts[j]
    }

    pub fn span_len(&self, j: usize) -> usize {
        self.0.lens[j]
    }

    pub fn offset(&self, j: usize) -> usize {
        self.0.offsets[j]
    }

    /// One past the largest row index any span touches.
    pub fn end(&self) -> usize {
        self.0.end
    }
}

/// Tensor-op builder. See the module docs.
pub trait Graph {
    type Var: Clone;

    fn is_training(&self) -> bool;
    /// A non-trainable input. Rejects non-finite data.
    fn constant(&mut self, t: Tensor) -> Result<Self::Var>;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `a * b^T`.
    fn matmul_bt(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, a: &Self::Var, s: f64) -> Result<Self::Var>;
    fn concat_cols(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    /// Embedding lookup / row gather.
    fn gather_rows(&mut self, src: &Self::Var, idx: &[usize]) -> Result<Self::Var>;
    /// Sums row `i` of `src` into row `idx[i]` of a zero `rows x d` matrix.
    fn scatter_rows(&mut self, src: &Self::Var, idx: &[usize], rows: usize)
        -> Result<Self::Var>;
    /// Masked mean-pool: one output row per span.
    fn span_mean(&mut self, x: &Self::Var, spans: &Spans) -> Result<Self::Var>;
    /// Ragged dot products `q_j . keys_r` for each row `r` of span `j`.
    fn span_scores(&mut self, q: &Self::Var, keys: &Self::Var, spans: &Spans)
        -> Result<Self::Var>;
    /// Softmax within each span of a ragged score column.
    fn span_softmax(&mut self, scores: &Self::Var, spans: &Spans) -> Result<Self::Var>;
    /// `sum_r w_r * keys_r` per span.
    fn span_weighted_sum(
        &mut self,
        keys: &Self::Var,
        w: &Self::Var,
        spans: &Spans,
    ) -> Result<Self::Var>;
    fn layer_norm(
        &mut self,
        x: &Self::Var,
        gain: &Self::Var,
        bias: &Self::Var,
    ) -> Result<Self::Var>;
    fn softmax(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn gelu(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn tanh(&mut self, x: &Self::Var) -> Result<Self::Var>;
    /// Inverted dropout; identity outside training.
    fn dropout(&mut self, x: &Self::Var, p: f64) -> Result<Self::Var>;
    fn sum(&mut self, x: &Self::Var) -> Result<Self::Var>;
    /// Sum over rows of `-log softmax(logits_i)[targets_i]`.
    fn cross_entropy(&mut self, logits: &Self::Var, targets: &[usize]) -> Result<Self::Var>;
    /// Sum over rows of `tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))`.
    /// Masked teacher positions are excluded.
    fn kl_div(&mut self, student: &Self::Var, teacher: &Tensor, tau: f64) -> Result<Self::Var>;
    /// Mean squared error over the listed rows.
    fn mse(&mut self, pred: &Self::Var, target: &Tensor, rows: &[usize]) -> Result<Self::Var>;
}

/// Inference backend: values only, nothing recorded.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Graph for Eval {
    type Var = Tensor;

    fn is_training(&self) -> bool {
        false
    }

    fn constant(&mut self, t: Tensor) -> Result<Tensor> {
        if !t.is_finite() {
            return Err(Error::NonFinite("constant"));
        }
        Ok(t)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        store.get(id).clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::matmul(a, b)
    }
    fn matmul_bt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::matmul_bt(a, b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::add(a, b)
    }
    fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        fwd::add_row(a, row)
    }
    fn scale(&mut self, a: &Tensor, s: f64) -> Result<Tensor> {
        fwd::scale(a, s)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        fwd::concat_cols(&refs)
    }
    fn gather_rows(&mut self, src: &Tensor, idx: &[usize]) -> Result<Tensor> {
        fwd::gather_rows(src, idx)
    }
    fn scatter_rows(&mut self, src: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
        fwd::scatter_rows(src, idx, rows)
    }
    fn span_mean(&mut self, x: &Tensor, spans: &Spans) -> Result<Tensor> {
        fwd::span_mean(x, spans)
    }
    fn span_scores(&mut self, q: &Tensor, keys: &Tensor, spans: &Spans) -> Result<Tensor> {
        fwd::span_scores(q, keys, spans)
    }
    fn span_softmax(&mut self, scores: &Tensor, spans: &Spans) -> Result<Tensor> {
        fwd::span_softmax(scores, spans)
    }
    fn span_weighted_sum(&mut self, keys: &Tensor, w: &Tensor, spans: &Spans) -> Result<Tensor> {
        fwd::span_weighted_sum(keys, w, spans)
    }
    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        fwd::layer_norm(x, gain, bias).map(|(y, _, _)| y)
    }
    fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        fwd::softmax(x)
    }
    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(fwd::map(x, |v| v.max(0.0)))
    }
    fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(fwd::map(x, crate::kernels::gelu))
    }
    fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(fwd::map(x, f64::tanh))
    }
    fn dropout(&mut self, x: &Tensor, _p: f64) -> Result<Tensor> {
        Ok(x.clone())
    }
    fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(x.data().iter().sum()))
    }
    fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        fwd::cross_entropy(logits, targets).map(|(l, _)| l)
    }
    fn kl_div(&mut self, student: &Tensor, teacher: &Tensor, tau: f64) -> Result<Tensor> {
        fwd::kl_div(student, teacher, tau).map(|(l, _, _)| l)
    }
    fn mse(&mut self, pred: &Tensor, target: &Tensor, rows: &[usize]) -> Result<Tensor> {
        fwd::mse(pred, target, rows)
    }
}

/// Forward routines. Each validates shapes and rejects non-finite output.
pub(crate) mod fwd {
    use super::*;
    use crate::kernels;

    fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
        if t.is_finite() {
            Ok(t)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
        if t.rank() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = require_matrix("matmul", a)?;
        let (k2, n) = require_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape(), b.shape()),
            ));
        }
        let c = kernels::matmul(a.data(), m, k, b.data(), n);
        finite("matmul", Tensor::matrix(m, n, c))
    }

    pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = require_matrix("matmul_bt", a)?;
        let (n, k2) = require_matrix("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}^T", a.shape(), b.shape()),
            ));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(false, true, m, k, n, a.data(), b.data(), 0.0, &mut c);
        finite("matmul_bt", Tensor::matrix(m, n, c))
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", a.shape(), b.shape())));
        }
        let out: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        finite("add", Tensor::new(a.shape().to_vec(), out)?)
    }

    pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (m, n) = require_matrix("add_row", a)?;
        if row.numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", a.shape(), row.shape()),
            ));
        }
        let mut out = a.to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(row.data()) {
                *o += b;
            }
        }
        finite("add_row", Tensor::matrix(m, n, out))
    }

    pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data().iter().map(|v| v * s).collect();
        finite("scale", Tensor::new(a.shape().to_vec(), out)?)
    }

    pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let out: Vec<f64> = a.data().iter().map(|&v| f(v)).collect();
        Tensor::new(a.shape().to_vec(), out).expect("same shape")
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let m = parts[0].rows();
        for p in parts {
            if p.rank() != 2 || p.rows() != m {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "row mismatch: {:?}",
                        parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
                    ),
                ));
            }
        }
        let n: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(p.row_slice(r));
            }
        }
        Ok(Tensor::matrix(m, n, out))
    }

    pub fn gather_rows(src: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (n, _) = require_matrix("gather_rows", src)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of range for {:?}", src.shape()),
            ));
        }
        Ok(src.select_rows(idx))
    }

    pub fn scatter_rows(src: &Tensor, idx: &[usize], rows: usize) -> Result<Tensor> {
        let (n, d) = require_matrix("scatter_rows", src)?;
        if n != idx.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} rows, {} indices", n, idx.len()),
            ));
        }
        let mut out = vec![0.0; rows * d];
        for (i, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::shape("scatter_rows", format!("row {r} >= {rows}")));
            }
            kernels::axpy(1.0, src.row_slice(i), &mut out[r * d..(r + 1) * d]);
        }
        finite("scatter_rows", Tensor::matrix(rows, d, out))
    }

    fn check_spans(op: &'static str, x: &Tensor, spans: &Spans) -> Result<(usize, usize)> {
        let (r, d) = require_matrix(op, x)?;
        if spans.end() > r {
            return Err(Error::shape(
                op,
                format!("spans reach row {} but input has {} rows", spans.end(), r),
            ));
        }
        Ok((r, d))
    }

    pub fn span_mean(x: &Tensor, spans: &Spans) -> Result<Tensor> {
        let (_, d) = check_spans("span_mean", x, spans)?;
        let mut out = vec![0.0; spans.len() * d];
        for j in 0..spans.len() {
            let o = &mut out[j * d..(j + 1) * d];
            let s = spans.start(j);
            let len = spans.span_len(j);
            for r in s..s + len {
                kernels::axpy(1.0, x.row_slice(r), o);
            }
            let inv = 1.0 / len as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        finite("span_mean", Tensor::matrix(spans.len(), d, out))
    }

    pub fn span_scores(q: &Tensor, keys: &Tensor, spans: &Spans) -> Result<Tensor> {
        let (_, d) = check_spans("span_scores", keys, spans)?;
        let (qn, qd) = require_matrix("span_scores", q)?;
        if qn != spans.len() || qd != d {
            return Err(Error::shape(
                "span_scores",
                format!(
                    "queries {:?}, keys {:?}, {} spans",
                    q.shape(),
                    keys.shape(),
                    spans.len()
                ),
            ));
        }
        let mut out = vec![0.0; spans.total()];
        for j in 0..spans.len() {
            let qj = q.row_slice(j);
            let s = spans.start(j);
            let off = spans.offset(j);
            for r in 0..spans.span_len(j) {
                out[off + r] = kernels::dot(qj, keys.row_slice(s + r));
            }
        }
        finite("span_scores", Tensor::matrix(spans.total(), 1, out))
    }

    pub fn span_softmax(scores: &Tensor, spans: &Spans) -> Result<Tensor> {
        if scores.numel() != spans.total() {
            return Err(Error::shape(
                "span_softmax",
                format!("{} scores for ragged length {}", scores.numel(), spans.total()),
            ));
        }
        let mut out = vec![0.0; spans.total()];
        for j in 0..spans.len() {
            let a = spans.offset(j);
            let b = spans.offset(j + 1);
            kernels::softmax_into(&scores.data()[a..b], &mut out[a..b]);
        }
        finite("span_softmax", Tensor::matrix(spans.total(), 1, out))
    }

    pub fn span_weighted_sum(keys: &Tensor, w: &Tensor, spans: &Spans) -> Result<Tensor> {
        let (_, d) = check_spans("span_weighted_sum", keys, spans)?;
        if w.numel() != spans.total() {
            return Err(Error::shape(
                "span_weighted_sum",
                format!("{} weights for ragged length {}", w.numel(), spans.total()),
            ));
        }
        let mut out = vec![0.0; spans.len() * d];
        for j in 0..spans.len() {
            let o = &mut out[j * d..(j + 1) * d];
            let s = spans.start(j);
            let off = spans.offset(j);
            for r in 0..spans.span_len(j) {
                kernels::axpy(w.data()[off + r], keys.row_slice(s + r), o);
            }
        }
        finite("span_weighted_sum", Tensor::matrix(spans.len(), d, out))
    }

    pub fn layer_norm(
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (m, n) = require_matrix("layer_norm", x)?;
        if gain.numel() != n || bias.numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    x.shape(),
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let (y, xhat, rstd) = kernels::layer_norm(x.data(), m, n, gain.data(), bias.data());
        Ok((finite("layer_norm", Tensor::matrix(m, n, y))?, xhat, rstd))
    }

    pub fn softmax(x: &Tensor) -> Result<Tensor> {
        let (m, n) = (x.rows(), x.cols());
        let y = kernels::softmax_rows(x.data(), m, n);
        finite("softmax", Tensor::new(x.shape().to_vec(), y)?)
    }

    /// Returns the summed loss and the row softmax.
    pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let (m, c) = require_matrix("cross_entropy", logits)?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} rows, {} targets", m, targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {t} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for r in 0..m {
            let row = logits.row_slice(r);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[targets[r]];
            kernels::softmax_into(row, &mut probs[r * c..(r + 1) * c]);
        }
        Ok((finite("cross_entropy", Tensor::scalar(total))?, probs))
    }

    /// Returns `(loss, teacher probs, student tempered probs)`.
    pub fn kl_div(
        student: &Tensor,
        teacher: &Tensor,
        tau: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let (m, c) = require_matrix("kl_div", student)?;
        if teacher.shape() != student.shape() {
            return Err(Error::shape(
                "kl_div",
                format!("student {:?}, teacher {:?}", student.shape(), teacher.shape()),
            ));
        }
        let mut p = vec![0.0; m * c];
        let mut q = vec![0.0; m * c];
        let mut total = 0.0;
        let mut scaled = vec![0.0; c];
        let mut log_p = vec![0.0; c];
        for r in 0..m {
            // Both sides go through the same arithmetic so that equal
            // logits give exactly zero.
            let tr = teacher.row_slice(r);
            let mut t_lse = f64::NEG_INFINITY;
            let unmasked: Vec<f64> = tr.iter().filter(|v| !is_masked(**v)).map(|v| v / tau).collect();
            if !unmasked.is_empty() {
                t_lse = kernels::log_sum_exp(&unmasked);
            }
            if t_lse == f64::NEG_INFINITY {
                return Err(Error::invalid("teacher row has no unmasked entries"));
            }
            for (s, &v) in scaled.iter_mut().zip(student.row_slice(r)) {
                *s = v / tau;
            }
            let lse = kernels::log_sum_exp(&scaled);
            let pr = &mut p[r * c..(r + 1) * c];
            let qr = &mut q[r * c..(r + 1) * c];
            let mut kl = 0.0;
            for j in 0..c {
                let log_q = scaled[j] - lse;
                qr[j] = log_q.exp();
                if is_masked(tr[j]) {
                    continue;
                }
                log_p[j] = tr[j] / tau - t_lse;
                pr[j] = log_p[j].exp();
                kl += pr[j] * (log_p[j] - log_q);
            }
            total += tau * tau * kl.max(0.0);
        }
        Ok((finite("kl_div", Tensor::scalar(total))?, p, q))
    }

    pub fn mse(pred: &Tensor, target: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let (m, d) = require_matrix("mse", pred)?;
        if target.shape() != pred.shape() {
            return Err(Error::shape(
                "mse",
                format!("pred {:?}, target {:?}", pred.shape(), target.shape()),
            ));
        }
        if rows.is_empty() {
            return Err(Error::invalid("mse over zero rows"));
        }
        let mut total = 0.0;
        for &r in rows {
            if r >= m {
                return Err(Error::shape("mse", format!("row {r} >= {m}")));
            }
            for (a, b) in pred.row_slice(r).iter().zip(target.row_slice(r)) {
                total += (a - b) * (a - b);
            }
        }
        finite("mse", Tensor::scalar(total / (rows.len() * d) as f64))
    }
}
