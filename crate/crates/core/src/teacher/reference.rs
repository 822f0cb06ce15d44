//! Forward-only encoder-decoder Transformer used as the latency baseline.
//!
//! Each block is pre-norm masked self-attention over the SID prefix,
//! cross-attention over the encoder states, then a ReLU FFN. Weights are
//! frozen random draws; only the amount of work matters here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::Catalog;
use crate::decode::{BeamRow, Counters, StepLogits, StepScorer};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::glorot_tensor;
use crate::tensor::{Tensor, TrackedVec};

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
    pub kv_cache: bool,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            layers: 4,
            hidden: 128,
            heads: 6,
            head_dim: 64,
            ffn: 1024,
            kv_cache: true,
            seed: 11,
        }
    }
}

struct Layer {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    cq: Tensor,
    ck: Tensor,
    cv: Tensor,
    co: Tensor,
    w1: Tensor,
    w2: Tensor,
}

pub struct ReferenceDecoder {
    cfg: ReferenceConfig,
    l: usize,
    c: usize,
    d_mem: usize,
    emb: Tensor,
    layers: Vec<Layer>,
    w_out: Tensor,
    ones: Vec<f64>,
    zeros: Vec<f64>,
}

impl ReferenceDecoder {
    pub fn new(cfg: ReferenceConfig, catalog: &Catalog, d_mem: usize) -> Result<Self> {
        if cfg.layers == 0 || cfg.heads == 0 || cfg.head_dim == 0 || cfg.hidden == 0 {
            return Err(Error::invalid("reference decoder needs N >= 1 and non-zero widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (l, c) = (catalog.depth(), catalog.codebook());
        let h = cfg.hidden;
        let inner = cfg.heads * cfg.head_dim;
        let emb = glorot_tensor(1 + l * c, h, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                wq: glorot_tensor(h, inner, &mut rng),
                wk: glorot_tensor(h, inner, &mut rng),
                wv: glorot_tensor(h, inner, &mut rng),
                wo: glorot_tensor(inner, h, &mut rng),
                cq: glorot_tensor(h, inner, &mut rng),
                ck: glorot_tensor(d_mem, inner, &mut rng),
                cv: glorot_tensor(d_mem, inner, &mut rng),
                co: glorot_tensor(inner, h, &mut rng),
                w1: glorot_tensor(h, cfg.ffn, &mut rng),
                w2: glorot_tensor(cfg.ffn, h, &mut rng),
            })
            .collect();
        let w_out = glorot_tensor(h, c, &mut rng);
        Ok(ReferenceDecoder {
            l,
            c,
            d_mem,
            emb,
            layers,
            w_out,
            ones: vec![1.0; h],
            zeros: vec![0.0; h],
            cfg,
        })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.cfg
    }

    fn inner(&self) -> usize {
        self.cfg.heads * self.cfg.head_dim
    }

    /// Token id fed at step `t`: BOS first, then the previous digit.
    fn input_token(&self, prefix: &[u16], pos: usize) -> usize {
        if pos == 0 {
            0
        } else {
            1 + (pos - 1) * self.c + prefix[pos - 1] as usize
        }
    }

    fn norm(&self, x: &[f64], rows: usize) -> Vec<f64> {
        kernels::layer_norm(x, rows, self.cfg.hidden, &self.ones, &self.zeros).0
    }

    fn project(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
        kernels::matmul(x, rows, w.rows(), w.data(), w.cols())
    }

    /// Multi-head attention of one query row over `n` key/value rows.
    fn attend(&self, q: &[f64], keys: &[f64], values: &[f64], n: usize, out: &mut [f64]) {
        let (heads, dk) = (self.cfg.heads, self.cfg.head_dim);
        let inner = heads * dk;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut scores = vec![0.0; n];
        let mut w = vec![0.0; n];
        for h in 0..heads {
            let qh = &q[h * dk..(h + 1) * dk];
            for (i, s) in scores.iter_mut().enumerate() {
                *s = kernels::dot(qh, &keys[i * inner + h * dk..i * inner + (h + 1) * dk]) * scale;
            }
            kernels::softmax_into(&scores, &mut w);
            let oh = &mut out[h * dk..(h + 1) * dk];
            oh.iter_mut().for_each(|v| *v = 0.0);
            for (i, &wi) in w.iter().enumerate() {
                kernels::axpy(wi, &values[i * inner + h * dk..i * inner + (h + 1) * dk], oh);
            }
        }
    }

    fn ffn(&self, layer: &Layer, x: &mut [f64], rows: usize) {
        let h = self.norm(x, rows);
        let mut a = Self::project(&h, rows, &layer.w1);
        a.iter_mut().for_each(|v| *v = v.max(0.0));
        let o = Self::project(&a, rows, &layer.w2);
        kernels::axpy(1.0, &o, x);
    }

    fn cross(&self, layer: &Layer, x: &mut [f64], rows: usize, mem: &[(&TrackedVec, &TrackedVec, usize)]) {
        let inner = self.inner();
        let h = self.norm(x, rows);
        let q = Self::project(&h, rows, &layer.cq);
        let mut att = vec![0.0; rows * inner];
        for r in 0..rows {
            let (k, v, s) = mem[r];
            self.attend(&q[r * inner..(r + 1) * inner], k.as_slice(), v.as_slice(), s, &mut att[r * inner..(r + 1) * inner]);
        }
        let o = Self::project(&att, rows, &layer.co);
        kernels::axpy(1.0, &o, x);
    }

    fn logits(&self, x: &[f64], rows: usize) -> Tensor {
        let h = self.norm(x, rows);
        Tensor::matrix(rows, self.c, Self::project(&h, rows, &self.w_out))
    }
}

/// Per-user cross-attention keys and values for every layer.
struct Memory {
    k: Vec<TrackedVec>,
    v: Vec<TrackedVec>,
    rows: usize,
}

pub struct ReferenceScorer<'a> {
    dec: &'a ReferenceDecoder,
    states: Vec<&'a Tensor>,
    memory: Vec<Option<Memory>>,
    /// Self-attention cache per beam row: per layer (keys, values).
    cache: Vec<Vec<(TrackedVec, TrackedVec)>>,
    counters: Counters,
}

impl<'a> ReferenceScorer<'a> {
    pub fn new(dec: &'a ReferenceDecoder, states: Vec<&'a Tensor>) -> Result<Self> {
        for s in &states {
            if s.cols() != dec.d_mem || s.rows() == 0 {
                return Err(Error::shape(
                    "reference",
                    format!("encoder states {:?}, expected width {}", s.shape(), dec.d_mem),
                ));
            }
        }
        let n = states.len();
        Ok(ReferenceScorer {
            dec,
            states,
            memory: (0..n).map(|_| None).collect(),
            cache: Vec::new(),
            counters: Counters::default(),
        })
    }

    fn build_memory(&self, user: usize) -> Memory {
        let h = self.states[user];
        let rows = h.rows();
        let mut k = Vec::with_capacity(self.dec.layers.len());
        let mut v = Vec::with_capacity(self.dec.layers.len());
        for layer in &self.dec.layers {
            let mut kb = TrackedVec::new();
            kb.extend_from_slice(&ReferenceDecoder::project(h.data(), rows, &layer.ck));
            let mut vb = TrackedVec::new();
            vb.extend_from_slice(&ReferenceDecoder::project(h.data(), rows, &layer.cv));
            k.push(kb);
            v.push(vb);
        }
        Memory { k, v, rows }
    }

    fn step_cached(&mut self, t: usize, rows: &[BeamRow]) -> Result<Tensor> {
        let dec = self.dec;
        let (hid, inner, nl) = (dec.cfg.hidden, dec.inner(), dec.layers.len());
        let n = rows.len();
        for r in rows {
            if self.memory[r.user].is_none() {
                self.memory[r.user] = Some(self.build_memory(r.user));
            }
        }
        // Reorder the self-attention cache to follow the surviving beams.
        let mut cache: Vec<Vec<(TrackedVec, TrackedVec)>> = Vec::with_capacity(n);
        for r in rows {
            if t == 0 {
                cache.push((0..nl).map(|_| (TrackedVec::with_capacity(dec.l * inner), TrackedVec::with_capacity(dec.l * inner))).collect());
            } else {
                let src = &self.cache[r.parent];
                self.counters.kv_bytes_moved += src.iter().map(|(k, v)| (k.bytes() + v.bytes()) as u64).sum::<u64>();
                cache.push(src.clone());
            }
        }
        self.cache = cache;

        let tokens: Vec<usize> = rows.iter().map(|r| dec.input_token(&r.prefix, t)).collect();
        let mut x = dec.emb.select_rows(&tokens).to_vec();
        for (li, layer) in dec.layers.iter().enumerate() {
            let h = dec.norm(&x, n);
            let q = ReferenceDecoder::project(&h, n, &layer.wq);
            let k = ReferenceDecoder::project(&h, n, &layer.wk);
            let v = ReferenceDecoder::project(&h, n, &layer.wv);
            let mut att = vec![0.0; n * inner];
            for r in 0..n {
                let (kc, vc) = &mut self.cache[r][li];
                kc.extend_from_slice(&k[r * inner..(r + 1) * inner]);
                vc.extend_from_slice(&v[r * inner..(r + 1) * inner]);
                dec.attend(&q[r * inner..(r + 1) * inner], kc.as_slice(), vc.as_slice(), t + 1, &mut att[r * inner..(r + 1) * inner]);
            }
            self.counters.self_attn_positions += (n * (t + 1)) as u64;
            let o = ReferenceDecoder::project(&att, n, &layer.wo);
            kernels::axpy(1.0, &o, &mut x);

            let mem: Vec<(&TrackedVec, &TrackedVec, usize)> = rows
                .iter()
                .map(|r| {
                    let m = self.memory[r.user].as_ref().unwrap();
                    (&m.k[li], &m.v[li], m.rows)
                })
                .collect();
            self.counters.xattn_reads += mem.iter().map(|m| m.2 as u64).sum::<u64>();
            dec.cross(layer, &mut x, n, &mem);
            dec.ffn(layer, &mut x, n);
            self.counters.block_evals += n as u64;
        }
        debug_assert_eq!(x.len(), n * hid);
        Ok(dec.logits(&x, n))
    }

    /// Recomputes the whole prefix (and the cross-attention projections)
    /// for every beam at every step.
    fn step_uncached(&mut self, t: usize, rows: &[BeamRow]) -> Result<Tensor> {
        let dec = self.dec;
        let (hid, inner) = (dec.cfg.hidden, dec.inner());
        let n = rows.len();
        let len = t + 1;
        let mems: Vec<Memory> = {
            let mut users: Vec<usize> = rows.iter().map(|r| r.user).collect();
            users.dedup();
            let mut out = Vec::new();
            for u in 0..self.states.len() {
                if users.contains(&u) {
                    out.push(self.build_memory(u));
                } else {
                    out.push(Memory { k: Vec::new(), v: Vec::new(), rows: 0 });
                }
            }
            out
        };
        let mut last = Vec::with_capacity(n * hid);
        for r in rows {
            let tokens: Vec<usize> = (0..len).map(|p| dec.input_token(&r.prefix, p)).collect();
            let mut x = dec.emb.select_rows(&tokens).to_vec();
            for (li, layer) in dec.layers.iter().enumerate() {
                let h = dec.norm(&x, len);
                let q = ReferenceDecoder::project(&h, len, &layer.wq);
                let k = ReferenceDecoder::project(&h, len, &layer.wk);
                let v = ReferenceDecoder::project(&h, len, &layer.wv);
                let mut att = vec![0.0; len * inner];
                for p in 0..len {
                    dec.attend(&q[p * inner..(p + 1) * inner], &k[..(p + 1) * inner], &v[..(p + 1) * inner], p + 1, &mut att[p * inner..(p + 1) * inner]);
                    self.counters.self_attn_positions += (p + 1) as u64;
                }
                let o = ReferenceDecoder::project(&att, len, &layer.wo);
                kernels::axpy(1.0, &o, &mut x);
                let m = &mems[r.user];
                let mem = vec![(&m.k[li], &m.v[li], m.rows); len];
                self.counters.xattn_reads += (m.rows * len) as u64;
                dec.cross(layer, &mut x, len, &mem);
                dec.ffn(layer, &mut x, len);
                self.counters.block_evals += 1;
            }
            last.extend_from_slice(&x[t * hid..(t + 1) * hid]);
        }
        Ok(dec.logits(&last, n))
    }
}

impl StepScorer for ReferenceScorer<'_> {
    fn step(&mut self, t: usize, rows: &[BeamRow]) -> Result<StepLogits> {
        if t >= self.dec.l {
            return Err(Error::invalid(format!("step {t} beyond SID length")));
        }
        let logits = if self.dec.cfg.kv_cache {
            self.step_cached(t, rows)?
        } else {
            self.step_uncached(t, rows)?
        };
        Ok(StepLogits { logits, offset: 0 })
    }

    fn counters(&self) -> Counters {
        self.counters
    }
}
