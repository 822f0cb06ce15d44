//! Role-specific MLP encoder that stands in for the teacher's encoder.
//!
//! Every layer mean-pools the current token states into a user summary `g`
//! and updates each token with a residual `x_i += F_{a_i}([x_i; g])`, where
//! the MLP `F_a` is picked by the token's role in the serialized stream.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Eval, Graph, Spans};
use crate::params::{ParamId, ParamStore};
use crate::teacher::OracleTeacher;
use crate::tensor::Tensor;

use super::nn::{Bind, Dense};

pub const ROLES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Number of residual layers `R`.
    pub depth: usize,
    /// Hidden width of each role MLP.
    pub width: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub max_len: usize,
    /// One MLP for all roles instead of four.
    pub shared_roles: bool,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(d_h: usize, d_e: usize) -> Self {
        EncoderConfig {
            depth: 4,
            width: 1024,
            d_h,
            d_e,
            max_len: 256,
            shared_roles: false,
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.d_h == 0 || self.d_e == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder depth and widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "depth = {}\nwidth = {}\nd_h = {}\nd_e = {}\nmax_len = {}\nshared_roles = {}\nseed = {}\n",
            self.depth, self.width, self.d_h, self.d_e, self.max_len, self.shared_roles, self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = EncoderConfig::new(1, 1);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("bad value {v:?} for {k}"));
            match k {
                "depth" => cfg.depth = v.parse().map_err(|_| bad())?,
                "width" => cfg.width = v.parse().map_err(|_| bad())?,
                "d_h" => cfg.d_h = v.parse().map_err(|_| bad())?,
                "d_e" => cfg.d_e = v.parse().map_err(|_| bad())?,
                "max_len" => cfg.max_len = v.parse().map_err(|_| bad())?,
                "shared_roles" => cfg.shared_roles = v.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown encoder key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token ids as laid out by the oracle, plus a padding id only the
/// encoder understands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub l: usize,
    pub c: usize,
}

impl Vocab {
    pub fn user(&self) -> usize {
        self.l * self.c
    }

    pub fn eos(&self) -> usize {
        self.l * self.c + 1
    }

    pub fn pad(&self) -> usize {
        self.l * self.c + 2
    }

    /// Number of embedded tokens (padding excluded).
    pub fn size(&self) -> usize {
        self.l * self.c + 2
    }
}

/// Roles 1..=4 for the non-padding prefix of a serialized stream. Digit
/// position `j` of an item gets role `min(j, 4)`; user and EOS tokens get 4.
pub fn assign_roles(tokens: &[usize], vocab: Vocab) -> Result<Vec<u8>> {
    let n = tokens.iter().position(|&t| t == vocab.pad()).unwrap_or(tokens.len());
    if let Some(i) = tokens[n..].iter().position(|&t| t != vocab.pad()) {
        return Err(Error::Parse {
            line: n + i,
            msg: "token after padding".into(),
        });
    }
    let body = &tokens[..n];
    let at = |i: usize, msg: &str| Error::Parse {
        line: i,
        msg: msg.to_string(),
    };
    if body.len() < 2 {
        return Err(at(0, "stream needs a user and an EOS token"));
    }
    if body[0] != vocab.user() {
        return Err(at(0, "stream must open with the user token"));
    }
    if body[n - 1] != vocab.eos() {
        return Err(at(n - 1, "stream must close with EOS"));
    }
    let mut roles = Vec::with_capacity(n);
    roles.push(ROLES as u8);
    for (k, &tok) in body[1..n - 1].iter().enumerate() {
        let want = k % vocab.l;
        if tok >= vocab.user() || tok / vocab.c != want {
            return Err(at(k + 1, &format!("expected a digit token for SID position {}", want + 1)));
        }
        roles.push((want + 1).min(ROLES) as u8);
    }
    if (n - 2) % vocab.l != 0 {
        return Err(at(n - 1, "EOS in the middle of an item"));
    }
    roles.push(ROLES as u8);
    Ok(roles)
}

pub struct StudentEncoder {
    cfg: EncoderConfig,
    vocab: Vocab,
    store: ParamStore,
    token_emb: Tensor,
    proj: Dense,
    pos: ParamId,
    /// Per layer: one `(hidden, out)` pair per role, or one if shared.
    layers: Vec<Vec<(Dense, Dense)>>,
}

impl StudentEncoder {
    /// `token_emb` is the frozen `V x d_e` table of the teacher vocabulary.
    pub fn new(cfg: EncoderConfig, vocab: Vocab, token_emb: Tensor) -> Result<Self> {
        cfg.validate()?;
        if token_emb.shape() != [vocab.size(), cfg.d_e] {
            return Err(Error::shape(
                "StudentEncoder::new",
                format!("token table {:?}, expected [{}, {}]", token_emb.shape(), vocab.size(), cfg.d_e),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let proj = Dense::new(&mut store, "enc.proj", cfg.d_e, cfg.d_h, &mut rng);
        let pos = store.glorot("enc.pos", cfg.max_len, cfg.d_h, &mut rng);
        let per_layer = if cfg.shared_roles { 1 } else { ROLES };
        let layers = (0..cfg.depth)
            .map(|r| {
                (0..per_layer)
                    .map(|a| {
                        let name = format!("enc.l{r}.f{}", a + 1);
                        (
                            Dense::new(&mut store, &format!("{name}.hidden"), 2 * cfg.d_h, cfg.width, &mut rng),
                            Dense::new(&mut store, &format!("{name}.out"), cfg.width, cfg.d_h, &mut rng),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(StudentEncoder {
            cfg,
            vocab,
            store,
            token_emb,
            proj,
            pos,
            layers,
        })
    }

    pub fn from_oracle(cfg: EncoderConfig, oracle: &OracleTeacher) -> Result<Self> {
        let cat = oracle.catalog();
        let vocab = Vocab {
            l: cat.depth(),
            c: cat.codebook(),
        };
        StudentEncoder::new(cfg, vocab, oracle.token_embeddings().clone())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroes every role MLP's output layer, making each layer an identity.
    pub fn zero_role_outputs(&mut self) {
        for layer in &self.layers {
            for (_, out) in layer {
                for id in [out.w, out.b] {
                    let shape = self.store.get(id).shape().to_vec();
                    self.store.set(id, Tensor::zeros(&shape));
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_store(&self.store, path)?;
        fs::write(path.with_extension("cfg"), self.cfg.to_kv())?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: Vocab, token_emb: Tensor) -> Result<Self> {
        let cfg = EncoderConfig::from_kv(&fs::read_to_string(path.with_extension("cfg"))?)?;
        let mut e = StudentEncoder::new(cfg, vocab, token_emb)?;
        checkpoint::load_into(&mut e.store, checkpoint::read_file(path)?)?;
        Ok(e)
    }

    /// Encodes several (possibly padded) streams. Returns the stacked
    /// non-padding rows and one span per stream. With `frozen` set the
    /// parameters enter as constants and receive no gradient.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        seqs: &[&[usize]],
        frozen: bool,
    ) -> Result<(G::Var, Spans)> {
        let p = Bind {
            store: &self.store,
            frozen,
        };
        let mut toks = Vec::new();
        let mut positions = Vec::new();
        let mut roles: Vec<Vec<usize>> = vec![Vec::new(); ROLES];
        let mut owner = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for (u, s) in seqs.iter().enumerate() {
            let r = assign_roles(s, self.vocab)?;
            if r.len() > self.cfg.max_len {
                return Err(Error::invalid(format!(
                    "stream of {} tokens exceeds max_len {}",
                    r.len(),
                    self.cfg.max_len
                )));
            }
            for (i, &a) in r.iter().enumerate() {
                roles[a as usize - 1].push(toks.len());
                toks.push(s[i]);
                positions.push(i);
                owner.push(u);
            }
            lens.push(r.len());
        }
        let spans = Spans::contiguous(&lens)?;
        let n = toks.len();

        let table = g.constant(self.token_emb.clone())?;
        let e = g.gather_rows(&table, &toks)?;
        let x = self.proj.forward(g, p, &e)?;
        let pos = p.var(g, self.pos)?;
        let pe = g.gather_rows(&pos, &positions)?;
        let mut x = g.add(&x, &pe)?;
        for layer in &self.layers {
            let pooled = g.span_mean(&x, &spans)?;
            let gr = g.gather_rows(&pooled, &owner)?;
            let inp = g.concat_cols(&[x.clone(), gr])?;
            let upd = if layer.len() == 1 {
                mlp(g, p, &layer[0], &inp)?
            } else {
                let mut acc: Option<G::Var> = None;
                for (a, rows) in roles.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = g.gather_rows(&inp, rows)?;
                    let o = mlp(g, p, &layer[a], &sub)?;
                    let o = g.scatter_rows(&o, rows, n)?;
                    acc = Some(match acc {
                        None => o,
                        Some(prev) => g.add(&prev, &o)?,
                    });
                }
                acc.expect("every stream has role-4 tokens")
            };
            x = g.add(&x, &upd)?;
        }
        Ok((x, spans))
    }

    /// Encoder states for one stream, padded rows returned as zeros.
    pub fn encode(&self, tokens: &[usize]) -> Result<Tensor> {
        let (x, _) = self.forward(&mut Eval, &[tokens], true)?;
        let d = self.cfg.d_h;
        let mut data = x.to_vec();
        data.resize(tokens.len() * d, 0.0);
        Ok(Tensor::matrix(tokens.len(), d, data))
    }
}

fn mlp<G: Graph>(g: &mut G, p: Bind, f: &(Dense, Dense), x: &G::Var) -> Result<G::Var> {
    let h = f.0.forward(g, p, x)?;
    let h = g.relu(&h)?;
    f.1.forward(g, p, &h)
}
