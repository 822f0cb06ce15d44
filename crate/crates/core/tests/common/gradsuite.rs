//! Randomised finite-difference checks shared by the gradient tests and
//! the acceptance run. Every instance draws fresh weights and inputs.

use std::collections::HashMap;

use super::{gradient_gap, random_matrix, GradGap};
use sidmlp::graph::{Eval, Graph};
use sidmlp::student::config::*;
use sidmlp::student::{stack_states, EncoderConfig, StudentDecoder, StudentEncoder, Vocab};
use sidmlp::train::distill_loss;
use sidmlp::{Gradients, ParamStore, Tape, Tensor, MASKED_LOGIT};

const L: usize = 3;
const C: usize = 5;
const D_H: usize = 6;
const D_E: usize = 3;
const SAMPLES: usize = 3;

pub struct GradCase {
    pub block: &'static str,
    pub name: String,
    pub gap: GradGap,
}

fn base_cfg(seed: u64) -> StudentConfig {
    let mut c = StudentConfig::new(L, C, D_H, D_E);
    c.head_hidden = 7;
    c.attn_heads = 2;
    c.attn_inner = 4;
    c.dropout = 0.0;
    c.seed = seed;
    c
}

fn variants(seed: u64) -> Vec<(&'static str, StudentConfig)> {
    let tweak = |f: fn(&mut StudentConfig)| {
        let mut c = base_cfg(seed);
        f(&mut c);
        c
    };
    vec![
        ("full", base_cfg(seed)),
        ("no_prefix", tweak(|c| c.prefix_mode = PrefixMode::None)),
        ("sum_prefix", tweak(|c| c.prefix_mode = PrefixMode::Sum)),
        (
            "shared_head",
            tweak(|c| {
                c.prefix_mode = PrefixMode::Sum;
                c.head_mode = HeadMode::Shared;
            }),
        ),
        ("cascade", tweak(|c| c.cascade = Cascade::HiddenState)),
        ("no_mha", tweak(|c| c.context_mode = ContextMode::LinearMeanpool)),
        ("per_digit_readout", tweak(|c| c.context_readout = Readout::PerDigit)),
        ("no_context_ffn", tweak(|c| c.context_ffn = Switch::Off)),
        ("full_vocab", tweak(|c| c.logit_support = LogitSupport::FullVocab)),
        (
            "no_teacher_emb",
            tweak(|c| {
                c.embeddings = Embeddings::Trainable;
                c.activation = Activation::Gelu;
            }),
        ),
    ]
}

fn named(store: &ParamStore, grads: &Gradients) -> HashMap<String, Vec<f64>> {
    store
        .ids()
        .filter_map(|id| grads.param(id).map(|g| (store.name(id).to_string(), g.to_vec())))
        .collect()
}

fn users(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Vec<u16>>) {
    let states = (0..n)
        .map(|u| random_matrix(1 + (u * 5 + seed as usize) % 8, D_H, seed * 31 + u as u64))
        .collect();
    let sids = (0..n)
        .map(|u| (0..L).map(|t| ((u * 7 + t * 3 + seed as usize) % C) as u16).collect())
        .collect();
    (states, sids)
}

/// Teacher logits over each step's support with a few digits masked.
fn teacher_logits(cfg: &StudentConfig, sids: &[Vec<u16>], seed: u64) -> (Vec<Tensor>, Vec<Vec<usize>>) {
    let width = cfg.output_width();
    let n = sids.len();
    let mut teacher = Vec::new();
    let mut targets = Vec::new();
    for t in 0..L {
        let off = cfg.logit_offset(t);
        let raw = random_matrix(n, width, seed * 7 + t as u64);
        let mut data = vec![MASKED_LOGIT; n * width];
        let mut tg = Vec::new();
        for (r, sid) in sids.iter().enumerate() {
            for d in 0..C {
                if d % 2 == 0 || d == sid[t] as usize {
                    data[r * width + off + d] = raw.get(r, off + d) * 3.0;
                }
            }
            tg.push(off + sid[t] as usize);
        }
        teacher.push(Tensor::matrix(n, width, data));
        targets.push(tg);
    }
    (teacher, targets)
}

fn digit_emb(seed: u64) -> Tensor {
    random_matrix(L * C, D_E, seed + 500)
}

/// Context block alone: squared error of `z` against a random target.
fn context_case(cfg: StudentConfig, seed: u64) -> GradGap {
    let (states, _) = users(3, seed);
    let refs: Vec<&Tensor> = states.iter().collect();
    let (h, spans) = stack_states(&refs).unwrap();
    let target = random_matrix(3, D_H, seed + 1000);
    let rows = [0, 1, 2];
    let mut m = StudentDecoder::new(cfg, Some(digit_emb(seed))).unwrap();
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone()).unwrap();
    let z = m.compute_context(&mut tape, &hv, &spans).unwrap();
    let loss = tape.mse(&z, &target, &rows).unwrap();
    let grads = named(m.params(), &tape.backward(loss).unwrap());
    gradient_gap(
        &mut m,
        StudentDecoder::params_mut,
        |m| {
            let z = m.compute_context(&mut Eval, &h, &spans).unwrap();
            Eval.mse(&z, &target, &rows).unwrap().item().unwrap()
        },
        |n| grads.get(n).cloned(),
        SAMPLES,
    )
}

fn heads_loss<G: Graph>(g: &mut G, m: &StudentDecoder, z: &G::Var, sids: &[Vec<u16>]) -> G::Var {
    let cfg = m.config().clone();
    let mut prev: Option<G::Var> = None;
    let mut total: Option<G::Var> = None;
    for t in 0..L {
        let prefixes: Vec<&[u16]> = sids.iter().map(|s| &s[..t]).collect();
        let (lg, hid) = m.head_forward(g, t, z, &prefixes, prev.as_ref()).unwrap();
        let tg: Vec<usize> = sids.iter().map(|s| cfg.logit_offset(t) + s[t] as usize).collect();
        let ce = g.cross_entropy(&lg, &tg).unwrap();
        total = Some(match total {
            None => ce,
            Some(p) => g.add(&p, &ce).unwrap(),
        });
        prev = Some(hid);
    }
    total.unwrap()
}

/// Prefix-conditioned heads on a fixed context, summed cross-entropy.
fn heads_case(cfg: StudentConfig, seed: u64) -> GradGap {
    let (_, sids) = users(4, seed);
    let z = random_matrix(4, D_H, seed + 2000);
    let mut m = StudentDecoder::new(cfg, Some(digit_emb(seed))).unwrap();
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone()).unwrap();
    let loss = heads_loss(&mut tape, &m, &zv, &sids);
    let grads = named(m.params(), &tape.backward(loss).unwrap());
    gradient_gap(
        &mut m,
        StudentDecoder::params_mut,
        |m| heads_loss(&mut Eval, m, &z, &sids).item().unwrap(),
        |n| grads.get(n).cloned(),
        SAMPLES,
    )
}

/// Whole decoder under the distillation loss.
fn decoder_case(cfg: StudentConfig, seed: u64, alpha: f64, tau: f64) -> GradGap {
    let (states, sids) = users(3, seed);
    let refs: Vec<&Tensor> = states.iter().collect();
    let (h, spans) = stack_states(&refs).unwrap();
    let sid_refs: Vec<&[u16]> = sids.iter().map(|s| s.as_slice()).collect();
    let (teacher, targets) = teacher_logits(&cfg, &sids, seed);
    let mut m = StudentDecoder::new(cfg, Some(digit_emb(seed))).unwrap();
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone()).unwrap();
    let lg = m.forward_teacher_forced(&mut tape, &hv, &spans, &sid_refs).unwrap();
    let loss = distill_loss(&mut tape, &lg, &teacher, &targets, alpha, tau).unwrap();
    let grads = named(m.params(), &tape.backward(loss).unwrap());
    gradient_gap(
        &mut m,
        StudentDecoder::params_mut,
        |m| {
            let lg = m.forward_teacher_forced(&mut Eval, &h, &spans, &sid_refs).unwrap();
            distill_loss(&mut Eval, &lg, &teacher, &targets, alpha, tau)
                .unwrap()
                .item()
                .unwrap()
        },
        |n| grads.get(n).cloned(),
        SAMPLES,
    )
}

fn scaled(t: Tensor, k: f64) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    Tensor::matrix(r, c, t.data().iter().map(|v| v * k).collect())
}

struct FreeLogits {
    store: ParamStore,
}

fn free_store(m: &mut FreeLogits) -> &mut ParamStore {
    &mut m.store
}

fn free_loss<G: Graph>(
    g: &mut G,
    m: &FreeLogits,
    teacher: &[Tensor],
    targets: &[Vec<usize>],
    alpha: f64,
    tau: f64,
) -> G::Var {
    let lg: Vec<G::Var> = m.store.ids().map(|id| g.param(&m.store, id)).collect();
    distill_loss(g, &lg, teacher, targets, alpha, tau).unwrap()
}

/// Distillation loss with the student logits themselves as parameters.
fn loss_case(seed: u64, alpha: f64, tau: f64) -> GradGap {
    let n = 4;
    let mut store = ParamStore::new();
    let mut teacher = Vec::new();
    let mut targets = Vec::new();
    for t in 0..L {
        store.add(format!("logits{t}"), scaled(random_matrix(n, C, seed * 13 + t as u64), 2.0));
        teacher.push(scaled(random_matrix(n, C, seed * 17 + t as u64), 3.0));
        targets.push((0..n).map(|r| (r + t + seed as usize) % C).collect());
    }
    let mut m = FreeLogits { store };
    let mut tape = Tape::new();
    let loss = free_loss(&mut tape, &m, &teacher, &targets, alpha, tau);
    let grads = named(&m.store, &tape.backward(loss).unwrap());
    gradient_gap(
        &mut m,
        free_store,
        |m| free_loss(&mut Eval, m, &teacher, &targets, alpha, tau).item().unwrap(),
        |n| grads.get(n).cloned(),
        SAMPLES * 4,
    )
}

const VOCAB: Vocab = Vocab { l: 4, c: 6 };

fn token_stream(items: &[[usize; 4]]) -> Vec<usize> {
    let mut s = vec![VOCAB.user()];
    for it in items {
        for (t, &d) in it.iter().enumerate() {
            s.push(t * VOCAB.c + d);
        }
    }
    s.push(VOCAB.eos());
    s
}

/// History encoder regressed onto random per-position targets.
fn encoder_case(depth: usize, shared: bool, seed: u64) -> GradGap {
    let mut cfg = EncoderConfig::new(5, D_E);
    cfg.depth = depth;
    cfg.width = 7;
    cfg.max_len = 40;
    cfg.shared_roles = shared;
    cfg.seed = seed;
    let emb = random_matrix(VOCAB.size(), D_E, seed + 3000);
    let mut e = StudentEncoder::new(cfg, VOCAB, emb).unwrap();
    let s = seed as usize;
    let seqs = [
        token_stream(&[[s % 6, 2, 3, 4]]),
        token_stream(&[[5, s % 6, 2, 1], [0, 1, (s + 3) % 6, 1]]),
    ];
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let rows: usize = seqs.iter().map(|s| s.len()).sum();
    let target = random_matrix(rows, 5, seed + 4000);
    let all: Vec<usize> = (0..rows).collect();
    let mut tape = Tape::new();
    let (x, _) = e.forward(&mut tape, &refs, false).unwrap();
    let loss = tape.mse(&x, &target, &all).unwrap();
    let grads = named(e.params(), &tape.backward(loss).unwrap());
    gradient_gap(
        &mut e,
        StudentEncoder::params_mut,
        |e| {
            let (x, _) = e.forward(&mut Eval, &refs, true).unwrap();
            Eval.mse(&x, &target, &all).unwrap().item().unwrap()
        },
        |n| grads.get(n).cloned(),
        SAMPLES,
    )
}

/// At least twenty randomised instances covering the context block, the
/// prefix heads, the distillation loss and the history encoder.
pub fn gradient_suite() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut push = |block, name: String, gap| out.push(GradCase { block, name, gap });
    for seed in 1..=3u64 {
        let mut c = base_cfg(seed);
        push("context", format!("mha seed {seed}"), context_case(c.clone(), seed));
        c.context_ffn = Switch::Off;
        push("context", format!("mha no ffn seed {seed}"), context_case(c, seed));
    }
    for (i, (name, cfg)) in variants(7).into_iter().enumerate() {
        if cfg.context_readout == Readout::PerDigit {
            continue;
        }
        push("heads", name.to_string(), heads_case(cfg, 40 + i as u64));
    }
    let settings = [(0.7, 1.0), (0.0, 1.0), (1.0, 2.0), (0.3, 0.5)];
    for (i, (name, cfg)) in variants(11).into_iter().enumerate() {
        let (alpha, tau) = settings[i % settings.len()];
        push(
            "decoder+loss",
            format!("{name} alpha {alpha} tau {tau}"),
            decoder_case(cfg, 60 + i as u64, alpha, tau),
        );
    }
    for (i, (alpha, tau)) in settings.into_iter().enumerate() {
        push("loss", format!("alpha {alpha} tau {tau}"), loss_case(80 + i as u64, alpha, tau));
    }
    for (i, (depth, shared)) in [(1, false), (2, false), (2, true)].into_iter().enumerate() {
        push(
            "encoder",
            format!("depth {depth} shared {shared}"),
            encoder_case(depth, shared, 90 + i as u64),
        );
    }
    out
}
