//! The MLP student decoder: one context vector per user, then one small
//! MLP head per SID digit conditioned on the digits chosen so far.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint;
use crate::decode::{BeamRow, Counters, StepLogits, StepScorer};
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Spans};
use crate::params::{ParamId, ParamStore};
use crate::teacher::OracleTeacher;
use crate::tensor::Tensor;

use super::config::*;
use super::nn::{activate, Bind, Dense, Norm};

struct AttnHead {
    q: Dense,
    k: ParamId,
    v: ParamId,
}

struct Attention {
    heads: Vec<AttnHead>,
    out: Dense,
}

enum EmbTable {
    Frozen(Tensor),
    Trainable(ParamId),
}

pub struct StudentDecoder {
    cfg: StudentConfig,
    store: ParamStore,
    /// Query projection; in `linear_meanpool` mode this is the whole context.
    wq: Dense,
    attn: Option<Attention>,
    ln1: Option<Norm>,
    ffn: Option<(Dense, Dense, Norm)>,
    wpq: Option<ParamId>,
    heads: Vec<(Dense, Dense)>,
    emb: EmbTable,
    trained: bool,
}

/// Digit-token rows `(t, c) -> t*C + c` of the oracle's embedding table.
pub fn teacher_digit_embeddings(oracle: &OracleTeacher) -> Tensor {
    let cat = oracle.catalog();
    let (l, c) = (cat.depth(), cat.codebook());
    let idx: Vec<usize> = (0..l)
        .flat_map(|t| (0..c).map(move |d| (t, d as u16)))
        .map(|(t, d)| oracle.digit_token(t, d))
        .collect();
    oracle.token_embeddings().select_rows(&idx)
}

impl StudentDecoder {
    /// `digit_emb` is the frozen `L*C x d_e` table; required unless the
    /// embeddings are trainable.
    pub fn new(cfg: StudentConfig, digit_emb: Option<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let (l, c, d_h, d_e) = (cfg.l, cfg.c, cfg.d_h, cfg.d_e);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let wq = Dense::new(&mut store, "ctx.wq", d_h, d_h, &mut rng);
        let (mut attn, mut ln1, mut ffn, mut wpq) = (None, None, None, None);
        if cfg.context_mode == ContextMode::Mha {
            let d_k = cfg.attn_inner / cfg.attn_heads;
            let heads = (0..cfg.attn_heads)
                .map(|i| AttnHead {
                    q: Dense::new(&mut store, &format!("ctx.attn{i}.q"), d_h, d_k, &mut rng),
                    k: store.glorot(format!("ctx.attn{i}.k"), d_h, d_k, &mut rng),
                    v: store.glorot(format!("ctx.attn{i}.v"), d_h, d_k, &mut rng),
                })
                .collect();
            let out = Dense::new(&mut store, "ctx.attn_out", cfg.attn_inner, d_h, &mut rng);
            attn = Some(Attention { heads, out });
            ln1 = Some(Norm::new(&mut store, "ctx.ln1", d_h));
            if cfg.context_ffn == Switch::On {
                ffn = Some((
                    Dense::new(&mut store, "ctx.ffn1", d_h, cfg.attn_inner, &mut rng),
                    Dense::new(&mut store, "ctx.ffn2", cfg.attn_inner, d_h, &mut rng),
                    Norm::new(&mut store, "ctx.ln2", d_h),
                ));
            }
            if cfg.context_readout == Readout::PerDigit {
                wpq = Some(store.glorot("ctx.wpq", d_e, d_h, &mut rng));
            }
        }
        let w = cfg.output_width();
        let heads = (0..cfg.head_count())
            .map(|t| {
                (
                    Dense::new(
                        &mut store,
                        &format!("head{t}.hidden"),
                        cfg.head_input_dim(t),
                        cfg.head_hidden,
                        &mut rng,
                    ),
                    Dense::new(&mut store, &format!("head{t}.out"), cfg.head_hidden, w, &mut rng),
                )
            })
            .collect();
        let emb = match cfg.embeddings {
            Embeddings::FrozenTeacher => {
                let t = digit_emb
                    .ok_or_else(|| Error::invalid("frozen embeddings need the teacher table"))?;
                if t.shape() != [l * c, d_e] {
                    return Err(Error::shape(
                        "StudentDecoder::new",
                        format!("embedding table {:?}, expected [{}, {d_e}]", t.shape(), l * c),
                    ));
                }
                EmbTable::Frozen(t)
            }
            Embeddings::Trainable => {
                let data = (0..l * c * d_e)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                EmbTable::Trainable(store.add("emb", Tensor::matrix(l * c, d_e, data)))
            }
        };
        Ok(StudentDecoder {
            cfg,
            store,
            wq,
            attn,
            ln1,
            ffn,
            wpq,
            heads,
            emb,
            trained: false,
        })
    }

    pub fn from_oracle(cfg: StudentConfig, oracle: &OracleTeacher) -> Result<Self> {
        let emb = teacher_digit_embeddings(oracle);
        StudentDecoder::new(cfg, Some(emb))
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks the weights as fit for decoding.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Writes the weights to `path` and the config next to it (`.cfg`).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(&self.store, path)?;
        fs::write(path.with_extension("cfg"), self.cfg.to_kv())?;
        Ok(())
    }

    pub fn load(path: &Path, digit_emb: Option<Tensor>) -> Result<Self> {
        let cfg = StudentConfig::from_kv(&fs::read_to_string(path.with_extension("cfg"))?)?;
        let mut m = StudentDecoder::new(cfg, digit_emb)?;
        checkpoint::load_into(&mut m.store, checkpoint::read_file(path)?)?;
        m.trained = true;
        Ok(m)
    }

    fn bind(&self) -> Bind<'_> {
        Bind::new(&self.store)
    }

    fn emb_var<G: Graph>(&self, g: &mut G) -> Result<G::Var> {
        match &self.emb {
            EmbTable::Frozen(t) => g.constant(t.clone()),
            EmbTable::Trainable(id) => Ok(g.param(&self.store, *id)),
        }
    }

    /// Mean-pooled query, one row per span.
    fn query<G: Graph>(&self, g: &mut G, h: &G::Var, spans: &Spans) -> Result<G::Var> {
        if spans.is_empty() {
            return Err(Error::invalid("no encoder states"));
        }
        let pooled = g.span_mean(h, spans)?;
        self.wq.forward(g, self.bind(), &pooled)
    }

    /// Attention readout, layer norms and FFN for query rows `q`, where
    /// query `j` attends over span `j` of `h`.
    fn block<G: Graph>(&self, g: &mut G, q: &G::Var, h: &G::Var, spans: &Spans) -> Result<G::Var> {
        let p = self.bind();
        let attn = self.attn.as_ref().expect("attention context");
        let d_k = self.cfg.attn_inner / self.cfg.attn_heads;
        let inv = 1.0 / (d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(attn.heads.len());
        for head in &attn.heads {
            let qh = head.q.forward(g, p, q)?;
            let wk = p.var(g, head.k)?;
            // (q W_Q) W_K^T dotted with H_i equals (q W_Q) . (H_i W_K).
            let qk = g.matmul_bt(&qh, &wk)?;
            let qk = g.scale(&qk, inv)?;
            let s = g.span_scores(&qk, h, spans)?;
            let a = g.span_softmax(&s, spans)?;
            let a = g.dropout(&a, self.cfg.dropout)?;
            let pooled = g.span_weighted_sum(h, &a, spans)?;
            let wv = p.var(g, head.v)?;
            outs.push(g.matmul(&pooled, &wv)?);
        }
        let cat = if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            g.concat_cols(&outs)?
        };
        let o = attn.out.forward(g, p, &cat)?;
        let r = g.add(q, &o)?;
        let z = self.ln1.as_ref().unwrap().forward(g, p, &r)?;
        match &self.ffn {
            None => Ok(z),
            Some((f1, f2, ln2)) => {
                let f = f1.forward(g, p, &z)?;
                let f = g.relu(&f)?;
                let f = f2.forward(g, p, &f)?;
                let r = g.add(&z, &f)?;
                ln2.forward(g, p, &r)
            }
        }
    }

    /// Context vector `z` for each user span of `h` (`users x d_h`).
    pub fn compute_context<G: Graph>(&self, g: &mut G, h: &G::Var, spans: &Spans) -> Result<G::Var> {
        let q = self.query(g, h, spans)?;
        match self.cfg.context_mode {
            ContextMode::LinearMeanpool => Ok(q),
            ContextMode::Mha => self.block(g, &q, h, spans),
        }
    }

    /// Context rows for the per-digit readout: row `r` uses the query of
    /// user `users[r]` shifted by its summed prefix embeddings.
    fn readout_rows<G: Graph>(
        &self,
        g: &mut G,
        q: &G::Var,
        h: &G::Var,
        spans: &Spans,
        users: &[usize],
        prefixes: &[&[u16]],
        t: usize,
    ) -> Result<G::Var> {
        let mut qr = g.gather_rows(q, users)?;
        if t > 0 {
            let emb = self.emb_var(g)?;
            let s = self.prefix_sum(g, &emb, prefixes, t)?;
            let w = self.bind().var(g, self.wpq.unwrap())?;
            let shift = g.matmul(&s, &w)?;
            qr = g.add(&qr, &shift)?;
        }
        let row_spans = Spans::new(
            users.iter().map(|&u| spans.start(u)).collect(),
            users.iter().map(|&u| spans.span_len(u)).collect(),
        )?;
        self.block(g, &qr, h, &row_spans)
    }

    fn check_prefixes(&self, prefixes: &[&[u16]], t: usize) -> Result<()> {
        for p in prefixes {
            if p.len() != t {
                return Err(Error::invalid(format!(
                    "head {} expects a prefix of {t} digits, got {}",
                    t + 1,
                    p.len()
                )));
            }
            if let Some((i, &d)) = p.iter().enumerate().find(|(_, &d)| d as usize >= self.cfg.c) {
                return Err(Error::DigitOutOfRange {
                    digit: d as usize,
                    position: i,
                    codebook: self.cfg.c,
                });
            }
        }
        Ok(())
    }

    /// `e(c_i)` for every row.
    fn prefix_rows<G: Graph>(
        &self,
        g: &mut G,
        emb: &G::Var,
        prefixes: &[&[u16]],
        i: usize,
    ) -> Result<G::Var> {
        let c = self.cfg.c;
        let idx: Vec<usize> = prefixes.iter().map(|p| i * c + p[i] as usize).collect();
        g.gather_rows(emb, &idx)
    }

    fn prefix_sum<G: Graph>(
        &self,
        g: &mut G,
        emb: &G::Var,
        prefixes: &[&[u16]],
        t: usize,
    ) -> Result<G::Var> {
        let mut s = self.prefix_rows(g, emb, prefixes, 0)?;
        for i in 1..t {
            let e = self.prefix_rows(g, emb, prefixes, i)?;
            s = g.add(&s, &e)?;
        }
        Ok(s)
    }

    /// Head for digit `t + 1` (0-based `t` = prefix length). `z` holds one
    /// context row per prefix. Returns `(logits, hidden)`; the hidden
    /// activation feeds the next head in cascade mode.
    pub fn head_forward<G: Graph>(
        &self,
        g: &mut G,
        t: usize,
        z: &G::Var,
        prefixes: &[&[u16]],
        prev_hidden: Option<&G::Var>,
    ) -> Result<(G::Var, G::Var)> {
        let cfg = &self.cfg;
        if t >= cfg.l {
            return Err(Error::invalid(format!("digit step {t} outside 0..{}", cfg.l)));
        }
        self.check_prefixes(prefixes, t)?;
        let rows = prefixes.len();
        let input = if cfg.cascade == Cascade::HiddenState && t > 0 {
            let prev = prev_hidden
                .ok_or_else(|| Error::invalid("cascade head needs the previous hidden state"))?;
            let emb = self.emb_var(g)?;
            let e = self.prefix_rows(g, &emb, prefixes, t - 1)?;
            g.concat_cols(&[prev.clone(), e])?
        } else {
            match (cfg.prefix_mode, cfg.head_mode) {
                (PrefixMode::None, _) => z.clone(),
                (_, HeadMode::PerDigit) if t == 0 => z.clone(),
                (PrefixMode::Sum, HeadMode::Shared) if t == 0 => {
                    let zero = g.constant(Tensor::zeros(&[rows, cfg.d_e]))?;
                    g.concat_cols(&[z.clone(), zero])?
                }
                (PrefixMode::Sum, _) => {
                    let emb = self.emb_var(g)?;
                    let s = self.prefix_sum(g, &emb, prefixes, t)?;
                    g.concat_cols(&[z.clone(), s])?
                }
                (PrefixMode::Concat, _) => {
                    let emb = self.emb_var(g)?;
                    let mut parts = vec![z.clone()];
                    for i in 0..t {
                        parts.push(self.prefix_rows(g, &emb, prefixes, i)?);
                    }
                    g.concat_cols(&parts)?
                }
            }
        };
        let (hidden, out) = &self.heads[if cfg.head_mode == HeadMode::Shared { 0 } else { t }];
        let p = self.bind();
        let a = hidden.forward(g, p, &input)?;
        let a = activate(g, cfg.activation, &a)?;
        let a = g.dropout(&a, cfg.dropout)?;
        let logits = out.forward(g, p, &a)?;
        Ok((logits, a))
    }

    /// Logits for all `L` digits of known SIDs, one span of `h` per SID.
    pub fn forward_teacher_forced<G: Graph>(
        &self,
        g: &mut G,
        h: &G::Var,
        spans: &Spans,
        sids: &[&[u16]],
    ) -> Result<Vec<G::Var>> {
        let l = self.cfg.l;
        if sids.len() != spans.len() {
            return Err(Error::invalid(format!(
                "{} SIDs for {} encoder spans",
                sids.len(),
                spans.len()
            )));
        }
        if let Some(s) = sids.iter().find(|s| s.len() != l) {
            return Err(Error::InvalidPrefix(s.to_vec()));
        }
        let per_digit = self.cfg.context_readout == Readout::PerDigit;
        let (z, q) = if per_digit {
            (None, Some(self.query(g, h, spans)?))
        } else {
            (Some(self.compute_context(g, h, spans)?), None)
        };
        let users: Vec<usize> = (0..sids.len()).collect();
        let mut out = Vec::with_capacity(l);
        let mut prev: Option<G::Var> = None;
        for t in 0..l {
            let prefixes: Vec<&[u16]> = sids.iter().map(|s| &s[..t]).collect();
            let zt = match &z {
                Some(z) => z.clone(),
                None => self.readout_rows(g, q.as_ref().unwrap(), h, spans, &users, &prefixes, t)?,
            };
            let (logits, hidden) = self.head_forward(g, t, &zt, &prefixes, prev.as_ref())?;
            out.push(logits);
            prev = Some(hidden);
        }
        Ok(out)
    }
}

/// Stacks per-user state matrices and returns them with one span each.
pub fn stack_states(states: &[&Tensor]) -> Result<(Tensor, Spans)> {
    let d = states.first().map(|t| t.cols()).unwrap_or(0);
    let mut data = Vec::with_capacity(states.iter().map(|t| t.numel()).sum());
    let mut lens = Vec::with_capacity(states.len());
    for (u, s) in states.iter().enumerate() {
        if s.rows() == 0 {
            return Err(Error::invalid(format!("user {u} has no encoder states")));
        }
        if s.cols() != d {
            return Err(Error::shape(
                "stack_states",
                format!("user {u} has width {}, expected {d}", s.cols()),
            ));
        }
        data.extend_from_slice(s.data());
        lens.push(s.rows());
    }
    let rows = lens.iter().sum();
    Ok((Tensor::matrix(rows, d, data), Spans::contiguous(&lens)?))
}

/// The student as a beam-search step scorer.
pub struct MlpScorer<'a> {
    model: &'a StudentDecoder,
    h: Tensor,
    spans: Spans,
    q: Option<Tensor>,
    z: Option<Tensor>,
    hidden: Option<Tensor>,
    counters: Counters,
}

impl<'a> MlpScorer<'a> {
    pub fn new(model: &'a StudentDecoder, states: &[&Tensor]) -> Result<Self> {
        if !model.is_trained() {
            return Err(Error::invalid("student has not been trained or loaded"));
        }
        let (h, spans) = stack_states(states)?;
        if h.cols() != model.cfg.d_h {
            return Err(Error::shape(
                "MlpScorer::new",
                format!("states of width {}, student expects {}", h.cols(), model.cfg.d_h),
            ));
        }
        Ok(MlpScorer {
            model,
            h,
            spans,
            q: None,
            z: None,
            hidden: None,
            counters: Counters::default(),
        })
    }
}

impl StepScorer for MlpScorer<'_> {
    fn step(&mut self, t: usize, rows: &[BeamRow]) -> Result<StepLogits> {
        let m = self.model;
        let mut g = Eval;
        let users: Vec<usize> = rows.iter().map(|r| r.user).collect();
        let prefixes: Vec<&[u16]> = rows.iter().map(|r| r.prefix.as_slice()).collect();
        let reads = |us: &mut dyn Iterator<Item = usize>| -> u64 {
            us.map(|u| self.spans.span_len(u) as u64).sum()
        };
        let z = match m.cfg.context_readout {
            Readout::Once => {
                if self.z.is_none() {
                    self.z = Some(m.compute_context(&mut g, &self.h, &self.spans)?);
                    self.counters.context_computations += self.spans.len() as u64;
                    if m.cfg.context_mode == ContextMode::Mha {
                        self.counters.xattn_reads += reads(&mut (0..self.spans.len()));
                    }
                }
                g.gather_rows(self.z.as_ref().unwrap(), &users)?
            }
            Readout::PerDigit => {
                if self.q.is_none() {
                    self.q = Some(m.query(&mut g, &self.h, &self.spans)?);
                }
                self.counters.context_computations += rows.len() as u64;
                self.counters.xattn_reads += reads(&mut users.iter().copied());
                let q = self.q.as_ref().unwrap();
                m.readout_rows(&mut g, q, &self.h, &self.spans, &users, &prefixes, t)?
            }
        };
        let prev = match (&self.hidden, m.cfg.cascade) {
            (_, Cascade::Off) => None,
            (_, _) if t == 0 => None,
            (None, _) => {
                return Err(Error::invalid(
                    "cascaded heads cannot resume from a prefix they did not decode",
                ))
            }
            (Some(hid), _) => {
                let parents: Vec<usize> = rows.iter().map(|r| r.parent).collect();
                Some(g.gather_rows(hid, &parents)?)
            }
        };
        let (logits, hidden) = m.head_forward(&mut g, t, &z, &prefixes, prev.as_ref())?;
        if m.cfg.cascade == Cascade::HiddenState {
            self.hidden = Some(hidden);
        }
        self.counters.head_evals += rows.len() as u64;
        Ok(StepLogits {
            logits,
            offset: m.cfg.logit_offset(t),
        })
    }

    fn counters(&self) -> Counters {
        self.counters
    }
}
