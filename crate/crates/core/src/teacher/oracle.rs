//! Closed-form teacher with an exactly computable next-item law.
//!
//! Encoder states are a frozen position-wise map of the serialized history,
//! `h_i = tanh(R1 e(tok_i) + R2 pos(i))`. The user vector is a decayed sum
//! `u = sum_i gamma^(n-i) W* h_first(i)` over history items, item scores are
//! `<u, r_v> / kappa` and the next-item law mixes their softmax with a
//! uniform floor. Item keys `r_v` are sums of per-node vectors along the
//! item's SID path, so items sharing a prefix have correlated scores.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::catalog::{Catalog, ItemId};
use crate::error::{Error, Result};
use crate::graph::MASKED_LOGIT;
use crate::kernels;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub d_h: usize,
    pub d_e: usize,
    /// Width of the sinusoidal position code.
    pub d_pos: usize,
    pub gamma: f64,
    pub kappa: f64,
    pub epsilon: f64,
    /// Correlation of a node vector with the shared vector of its digit.
    pub digit_share: f64,
    /// Weight of each depth's node vector in the item key.
    pub level_weights: Vec<f64>,
    /// Scale of the position term relative to the token term.
    pub pos_scale: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            d_h: 64,
            d_e: 32,
            d_pos: 16,
            gamma: 0.8,
            kappa: 1.0,
            epsilon: 0.05,
            digit_share: 0.5,
            level_weights: vec![1.0, 0.7, 0.5, 0.35],
            pos_scale: 1.0,
            seed: 7,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::invalid(format!("kappa {} must be positive", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.d_h == 0 || self.d_e == 0 || self.d_pos == 0 || self.d_pos % 2 != 0 {
            return Err(Error::invalid("oracle widths must be positive, d_pos even"));
        }
        Ok(())
    }
}

/// Sinusoidal code for position `i`, width `d` (even).
pub fn sinusoid(i: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for k in 0..d / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / d as f64);
        out[2 * k] = (i as f64 * freq).sin();
        out[2 * k + 1] = (i as f64 * freq).cos();
    }
    out
}

/// Probability mass under every trie node for one next-item law.
#[derive(Clone, Debug)]
pub struct PrefixMass {
    /// `mass[t][node]` for depth `t` in `0..=L`.
    pub mass: Vec<Vec<f64>>,
}

pub struct OracleTeacher {
    catalog: Arc<Catalog>,
    cfg: OracleConfig,
    token_emb: Tensor,
    r1: Tensor,
    r2: Tensor,
    w_star: Tensor,
    /// `M x d_h` item keys, in catalog index order.
    keys: Tensor,
    /// `S_max x d_h` position contributions `pos(i) R2`, grown on demand.
    pos_rows: std::sync::RwLock<Vec<Vec<f64>>>,
    /// `V x d_h` token contributions `e(tok) R1`.
    tok_rows: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

impl OracleTeacher {
    pub fn new(catalog: Arc<Catalog>, cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let l = catalog.depth();
        let c = catalog.codebook();
        if cfg.level_weights.len() != l {
            return Err(Error::invalid(format!(
                "{} level weights for depth {l}",
                cfg.level_weights.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d_h, d_e) = (cfg.d_h, cfg.d_e);
        let vocab = l * c + 2;

        // Digit tokens share a per-depth role direction so that the position
        // of first digits is recoverable from the states.
        let roles: Vec<Vec<f64>> = (0..l + 1).map(|_| gaussian(&mut rng, d_e, 1.0)).collect();
        let mut emb = Vec::with_capacity(vocab * d_e);
        for t in 0..l {
            for _ in 0..c {
                let noise = gaussian(&mut rng, d_e, 1.0);
                emb.extend(roles[t].iter().zip(&noise).map(|(r, z)| 0.7 * r + 0.7 * z));
            }
        }
        for _ in 0..2 {
            let noise = gaussian(&mut rng, d_e, 1.0);
            emb.extend(roles[l].iter().zip(&noise).map(|(r, z)| 0.7 * r + 0.7 * z));
        }
        let token_emb = Tensor::matrix(vocab, d_e, emb);
        let r1 = Tensor::matrix(d_e, d_h, gaussian(&mut rng, d_e * d_h, 1.0 / (d_e as f64).sqrt()));
        let r2 = Tensor::matrix(
            cfg.d_pos,
            d_h,
            gaussian(&mut rng, cfg.d_pos * d_h, cfg.pos_scale / (cfg.d_pos as f64).sqrt()),
        );
        let w_star = Tensor::matrix(d_h, d_h, gaussian(&mut rng, d_h * d_h, 1.0 / (d_h as f64).sqrt()));

        // Item keys from node vectors along each SID path.
        let rho = cfg.digit_share;
        let own = (1.0 - rho * rho).max(0.0).sqrt();
        let shared: Vec<Vec<f64>> = (0..l)
            .map(|_| gaussian(&mut rng, c * d_h, 1.0 / (d_h as f64).sqrt()))
            .collect();
        let trie = catalog.trie();
        let mut node_vecs: Vec<Vec<f64>> = Vec::with_capacity(l);
        for t in 1..=l {
            let n = trie.nodes_at(t);
            node_vecs.push(gaussian(&mut rng, n * d_h, 1.0 / (d_h as f64).sqrt()));
        }
        let mut keys = vec![0.0; catalog.len() * d_h];
        for idx in 0..catalog.len() {
            let sid = catalog.sid_at(idx).digits().to_vec();
            let path = catalog.path_at(idx).to_vec();
            let k = &mut keys[idx * d_h..(idx + 1) * d_h];
            for t in 0..l {
                let w = cfg.level_weights[t];
                let s = &shared[t][sid[t] as usize * d_h..(sid[t] as usize + 1) * d_h];
                let o = &node_vecs[t][path[t] * d_h..(path[t] + 1) * d_h];
                for j in 0..d_h {
                    k[j] += w * (rho * s[j] + own * o[j]);
                }
            }
        }
        let keys = Tensor::matrix(catalog.len(), d_h, keys);
        let tok_rows = kernels::matmul(token_emb.data(), vocab, d_e, r1.data(), d_h);
        Ok(OracleTeacher {
            catalog,
            cfg,
            token_emb,
            r1,
            r2,
            w_star,
            keys,
            pos_rows: std::sync::RwLock::new(Vec::new()),
            tok_rows,
        })
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn d_h(&self) -> usize {
        self.cfg.d_h
    }

    pub fn d_e(&self) -> usize {
        self.cfg.d_e
    }

    pub fn set_kappa(&mut self, kappa: f64) -> Result<()> {
        if !(kappa > 0.0) {
            return Err(Error::invalid(format!("kappa {kappa} must be positive")));
        }
        self.cfg.kappa = kappa;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.catalog.depth() * self.catalog.codebook() + 2
    }

    /// Token id of digit `c` at SID position `t` (0-based).
    pub fn digit_token(&self, t: usize, c: u16) -> usize {
        t * self.catalog.codebook() + c as usize
    }

    pub fn user_token(&self) -> usize {
        self.catalog.depth() * self.catalog.codebook()
    }

    pub fn eos_token(&self) -> usize {
        self.user_token() + 1
    }

    /// Frozen token embedding table, `V x d_e`.
    pub fn token_embeddings(&self) -> &Tensor {
        &self.token_emb
    }

    /// `[user, c1(v1) .. cL(v1), ..., cL(vn), EOS]`.
    pub fn serialize(&self, history: &[ItemId]) -> Result<Vec<usize>> {
        let l = self.catalog.depth();
        let mut out = Vec::with_capacity(2 + l * history.len());
        out.push(self.user_token());
        for &item in history {
            let sid = self.catalog.sid_of_item(item)?;
            for (t, &c) in sid.digits().iter().enumerate() {
                out.push(self.digit_token(t, c));
            }
        }
        out.push(self.eos_token());
        Ok(out)
    }

    fn pos_row(&self, i: usize) -> Vec<f64> {
        {
            let rows = self.pos_rows.read().unwrap();
            if let Some(r) = rows.get(i) {
                return r.clone();
            }
        }
        let mut rows = self.pos_rows.write().unwrap();
        while rows.len() <= i {
            let p = sinusoid(rows.len(), self.cfg.d_pos);
            rows.push(kernels::matmul(&p, 1, self.cfg.d_pos, self.r2.data(), self.cfg.d_h));
        }
        rows[i].clone()
    }

    /// State of token `tok` at position `i`.
    pub fn state_row(&self, tok: usize, i: usize) -> Vec<f64> {
        let d = self.cfg.d_h;
        let p = self.pos_row(i);
        self.tok_rows[tok * d..(tok + 1) * d]
            .iter()
            .zip(&p)
            .map(|(a, b)| (a + b).tanh())
            .collect()
    }

    /// Teacher encoder states `H_u`, one row per token.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let v = self.vocab_size();
        let d = self.cfg.d_h;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok >= v {
                return Err(Error::invalid(format!("token {tok} at position {i} outside vocabulary of {v}")));
            }
            out.extend(self.state_row(tok, i));
        }
        Ok(Tensor::matrix(tokens.len(), d, out))
    }

    pub fn encode_history(&self, history: &[ItemId]) -> Result<Tensor> {
        self.encode(&self.serialize(history)?)
    }

    /// Contribution of one history item at 0-based position `pos`.
    fn item_term(&self, item: ItemId, pos: usize) -> Result<Vec<f64>> {
        let l = self.catalog.depth();
        let c1 = self.catalog.sid_of_item(item)?.digits()[0];
        let h = self.state_row(self.digit_token(0, c1), 1 + l * pos);
        Ok(kernels::matmul(&h, 1, self.cfg.d_h, self.w_star.data(), self.cfg.d_h))
    }

    /// `u = sum_i gamma^(n-i) W* h_first(i)`.
    pub fn user_vector(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::invalid("empty history"));
        }
        let mut u = vec![0.0; self.cfg.d_h];
        for (pos, &item) in history.iter().enumerate() {
            u.iter_mut().for_each(|x| *x *= self.cfg.gamma);
            kernels::axpy(1.0, &self.item_term(item, pos)?, &mut u);
        }
        Ok(u)
    }

    /// Folds one more item into a running user vector.
    pub fn extend_user_vector(&self, u: &mut [f64], item: ItemId, pos: usize) -> Result<()> {
        u.iter_mut().for_each(|x| *x *= self.cfg.gamma);
        kernels::axpy(1.0, &self.item_term(item, pos)?, u);
        Ok(())
    }

    /// Log-probabilities of the next item, catalog index order.
    pub fn log_probs_from_user(&self, u: &[f64]) -> Vec<f64> {
        let m = self.catalog.len();
        let mut scores = kernels::matmul(self.keys.data(), m, self.cfg.d_h, u, 1);
        let inv = 1.0 / self.cfg.kappa;
        scores.iter_mut().for_each(|s| *s *= inv);
        let ls = kernels::log_softmax(&scores);
        let eps = self.cfg.epsilon;
        let floor = (eps / m as f64).ln();
        if eps == 0.0 {
            return ls;
        }
        if eps == 1.0 {
            return vec![floor; m];
        }
        let main = (1.0 - eps).ln();
        ls.iter()
            .map(|&v| {
                let a = main + v;
                let (hi, lo) = if a > floor { (a, floor) } else { (floor, a) };
                hi + (lo - hi).exp().ln_1p()
            })
            .collect()
    }

    pub fn next_item_log_probs(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        Ok(self.log_probs_from_user(&self.user_vector(history)?))
    }

    /// `p*(. | history)` over catalog indices.
    pub fn next_item_distribution(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        Ok(self.next_item_log_probs(history)?.into_iter().map(f64::exp).collect())
    }

    /// Aggregates item log-probabilities into log-mass per trie node.
    pub fn prefix_log_mass(&self, log_probs: &[f64]) -> PrefixMass {
        let cat = &self.catalog;
        let l = cat.depth();
        let trie = cat.trie();
        let mut mass: Vec<Vec<f64>> = (0..=l).map(|t| vec![f64::NEG_INFINITY; trie.nodes_at(t)]).collect();
        for idx in 0..cat.len() {
            mass[l][cat.path_at(idx)[l - 1]] = log_probs[idx];
        }
        for t in (0..l).rev() {
            for node in 0..trie.nodes_at(t) {
                let kids: Vec<f64> = trie.children(t, node).iter().map(|&(_, k)| mass[t + 1][k]).collect();
                mass[t][node] = kernels::log_sum_exp(&kids);
            }
        }
        PrefixMass { mass }
    }

    /// Digit logits at depth `prefix.len()`: log subtree mass for valid
    /// digits, the mask sentinel elsewhere.
    pub fn digit_logits_from_mass(&self, mass: &PrefixMass, prefix: &[u16]) -> Result<Vec<f64>> {
        let trie = self.catalog.trie();
        let t = prefix.len();
        if t >= self.catalog.depth() {
            return Err(Error::InvalidPrefix(prefix.to_vec()));
        }
        let node = trie.node(prefix).ok_or_else(|| Error::InvalidPrefix(prefix.to_vec()))?;
        let mut out = vec![MASKED_LOGIT; self.catalog.codebook()];
        for &(d, k) in trie.children(t, node) {
            out[d as usize] = mass.mass[t + 1][k];
        }
        Ok(out)
    }

    /// Teacher logits for digit `prefix.len() + 1` given a history.
    pub fn teacher_digit_logits(&self, history: &[ItemId], prefix: &[u16]) -> Result<Vec<f64>> {
        let mass = self.prefix_log_mass(&self.next_item_log_probs(history)?);
        self.digit_logits_from_mass(&mass, prefix)
    }

    /// Frozen tensors under stable names, for checkpointing.
    pub fn frozen_tensors(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("oracle.token_emb", self.token_emb.clone());
        s.add("oracle.r1", self.r1.clone());
        s.add("oracle.r2", self.r2.clone());
        s.add("oracle.w_star", self.w_star.clone());
        s.add("oracle.item_keys", self.keys.clone());
        s.add("oracle.kappa", Tensor::scalar(self.cfg.kappa));
        s
    }

    /// Fingerprint over every frozen tensor.
    pub fn fingerprint(&self) -> u64 {
        self.frozen_tensors().fingerprint()
    }

    /// Mean probability of the most likely item over the given histories.
    pub fn mean_top1_mass(&self, histories: &[&[ItemId]]) -> Result<f64> {
        let mut total = 0.0;
        for h in histories {
            let lp = self.next_item_log_probs(h)?;
            total += lp.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        }
        Ok(total / histories.len().max(1) as f64)
    }

    /// Bisects `kappa` (in log space) so the mean top-1 mass over
    /// `histories` hits `target`.
    pub fn calibrate_kappa(&mut self, histories: &[&[ItemId]], target: f64) -> Result<f64> {
        if histories.is_empty() {
            return Err(Error::invalid("no histories to calibrate on"));
        }
        let floor = self.cfg.epsilon / self.catalog.len() as f64 + (1.0 - self.cfg.epsilon) / self.catalog.len() as f64;
        if !(target > floor && target < 1.0 - self.cfg.epsilon) {
            return Err(Error::invalid(format!("top-1 target {target} unreachable")));
        }
        let (mut lo, mut hi) = (-8.0f64, 8.0f64);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            self.cfg.kappa = mid.exp();
            // larger kappa -> flatter -> smaller top-1 mass
            if self.mean_top1_mass(histories)? > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.cfg.kappa = (0.5 * (lo + hi)).exp();
        Ok(self.cfg.kappa)
    }
}
