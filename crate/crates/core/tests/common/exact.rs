//! Exhaustive checks on the 512-item catalog, shared by the decode and
//! oracle tests and the acceptance run.

use std::sync::OnceLock;

use sidmlp::catalog::Catalog;
use sidmlp::decode::*;
use sidmlp::experiment::Dataset;
use sidmlp::kernels::log_sum_exp;
use sidmlp::student::{teacher_digit_embeddings, MlpScorer, StudentConfig, StudentDecoder};
use sidmlp::synth::GeneratorProfile;
use sidmlp::{Result, Tensor};

pub fn small_dataset() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| Dataset::generate(&GeneratorProfile::small()).unwrap())
}

pub fn test_histories(ds: &Dataset, n: usize) -> Vec<&[u32]> {
    ds.split.test.iter().take(n).map(|e| e.history(&ds.records)).collect()
}

/// Untrained student with random weights, marked usable for decoding.
pub fn random_student(ds: &Dataset, seed: u64) -> StudentDecoder {
    let mut tmpl = StudentConfig::new(4, 256, 64, 32);
    tmpl.seed = seed;
    let cfg = ds.student_config(&tmpl);
    let mut m = StudentDecoder::new(cfg, Some(teacher_digit_embeddings(&ds.oracle))).unwrap();
    m.mark_trained();
    m
}

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
        Check { name: name.into(), ok, detail: detail.into() }
    }
}

/// Sum of per-digit log-conditionals along every item's SID, with each
/// step scored by `step` on the item's own prefix.
fn enumerate_scores(cat: &Catalog, mut step: impl FnMut(usize, &[BeamRow]) -> Result<StepLogits>) -> Vec<f64> {
    let m = cat.len();
    let mut scores = vec![0.0; m];
    for t in 0..cat.depth() {
        let rows: Vec<BeamRow> = (0..m)
            .map(|i| BeamRow { user: 0, parent: 0, prefix: cat.sid_at(i).digits()[..t].to_vec() })
            .collect();
        let out = step(t, &rows).unwrap();
        for (i, s) in scores.iter_mut().enumerate() {
            let row = out.logits.row_slice(i);
            *s += row[out.offset + cat.sid_at(i).digits()[t] as usize] - log_sum_exp(row);
        }
    }
    scores
}

/// Top `k` of a brute-force enumeration, ordered by (score desc, id asc).
pub fn brute_top(cat: &Catalog, scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut all: Vec<(u32, f64)> = (0..cat.len()).map(|i| (cat.id_at(i), scores[i])).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn compare(name: String, got: &[Hypothesis], want: &[(u32, f64)], tol: f64) -> Check {
    let items: Vec<u32> = got.iter().map(|h| h.item).collect();
    let wanted: Vec<u32> = want.iter().map(|w| w.0).collect();
    let gap = got.iter().zip(want).map(|(h, w)| (h.score - w.1).abs()).fold(0.0, f64::max);
    let ok = items == wanted && gap <= tol;
    Check::new(name, ok, format!("beam {items:?} brute {wanted:?} max score gap {gap:.1e}"))
}

/// Scores digit `d` by its parity, so whole groups of items tie exactly.
struct Parity {
    c: usize,
}

impl StepScorer for Parity {
    fn step(&mut self, _t: usize, rows: &[BeamRow]) -> Result<StepLogits> {
        let row: Vec<f64> = (0..self.c).map(|d| -((d % 2) as f64)).collect();
        Ok(StepLogits { logits: Tensor::matrix(rows.len(), self.c, row.repeat(rows.len())), offset: 0 })
    }

    fn counters(&self) -> Counters {
        Counters::default()
    }
}

/// Wide-beam decoding against brute-force enumeration, top-10.
pub fn beam_exactness(ds: &Dataset, users: usize) -> Vec<Check> {
    let cat = &ds.catalog;
    let m = cat.len();
    let wide = DecodeConfig::new(m, 10);
    let mut out = Vec::new();
    let hist = test_histories(ds, users);

    let mut scorer = TeacherScorer::new(&ds.oracle, hist.clone());
    let beams = beam_search(&mut scorer, cat, hist.len(), &wide).unwrap();
    for (u, h) in hist.iter().enumerate() {
        let mut one = TeacherScorer::new(&ds.oracle, vec![*h]);
        let scores = enumerate_scores(cat, |t, rows| one.step(t, rows));
        // Same arithmetic in the same order, so scores must agree bitwise.
        out.push(compare(format!("teacher user {u}"), &beams[u], &brute_top(cat, &scores, 10), 0.0));
    }

    let model = random_student(ds, 3);
    let states: Vec<Tensor> = hist.iter().map(|h| ds.oracle.encode_history(h).unwrap()).collect();
    let refs: Vec<&Tensor> = states.iter().collect();
    let mut scorer = MlpScorer::new(&model, &refs).unwrap();
    let beams = beam_search(&mut scorer, cat, refs.len(), &wide).unwrap();
    for (u, s) in states.iter().enumerate() {
        let mut one = MlpScorer::new(&model, &[s]).unwrap();
        let scores = enumerate_scores(cat, |t, rows| one.step(t, rows));
        out.push(compare(format!("student user {u}"), &beams[u], &brute_top(cat, &scores, 10), 1e-12));
    }

    let mut parity = Parity { c: cat.codebook() };
    let beams = beam_search(&mut parity, cat, 1, &wide).unwrap();
    let scores = enumerate_scores(cat, |t, rows| parity.step(t, rows));
    out.push(compare("exact ties".into(), &beams[0], &brute_top(cat, &scores, 10), 0.0));
    out
}

/// Largest |sum_t log p(d_t | prefix) - log p*(item)| over every item.
pub fn chain_rule_gap(ds: &Dataset, histories: &[&[u32]]) -> f64 {
    let cat = &ds.catalog;
    let mut worst: f64 = 0.0;
    for h in histories {
        let lp = ds.oracle.next_item_log_probs(h).unwrap();
        let mass = ds.oracle.prefix_log_mass(&lp);
        for idx in 0..cat.len() {
            let sid = cat.sid_at(idx).digits();
            let mut total = 0.0;
            for t in 0..cat.depth() {
                let logits = ds.oracle.digit_logits_from_mass(&mass, &sid[..t]).unwrap();
                total += logits[sid[t] as usize] - log_sum_exp(&logits);
            }
            worst = worst.max((total - lp[idx]).abs());
        }
    }
    worst
}

fn m_mode(ds: &Dataset, model: &StudentDecoder, hist: &[&[u32]], m: usize, cfg: &DecodeConfig) -> (Vec<Vec<Hypothesis>>, Counters) {
    let states: Vec<Tensor> = hist.iter().map(|h| ds.oracle.encode_history(h).unwrap()).collect();
    let refs: Vec<&Tensor> = states.iter().collect();
    let mut t = TeacherScorer::new(&ds.oracle, hist.to_vec());
    let mut s = MlpScorer::new(model, &refs).unwrap();
    let out = m_mode_decode(&mut t, &mut s, &ds.catalog, hist.len(), m, cfg).unwrap();
    let mut c = t.counters();
    c += s.counters();
    (out, c)
}

/// Hand-off endpoints against the single decoders and counter closed forms
/// for the interior split points.
pub fn m_mode_checks(ds: &Dataset, model: &StudentDecoder, users: usize, beam: usize) -> Vec<Check> {
    let cfg = DecodeConfig::new(beam, beam.min(10));
    let l = ds.catalog.depth();
    let hist = test_histories(ds, users);
    let mut out = Vec::new();

    let mut t = TeacherScorer::new(&ds.oracle, hist.clone());
    let teacher_only = beam_search(&mut t, &ds.catalog, hist.len(), &cfg).unwrap();
    let states: Vec<Tensor> = hist.iter().map(|h| ds.oracle.encode_history(h).unwrap()).collect();
    let refs: Vec<&Tensor> = states.iter().collect();
    let mut s = MlpScorer::new(model, &refs).unwrap();
    let student_only = beam_search(&mut s, &ds.catalog, hist.len(), &cfg).unwrap();
    // Hypothesis equality compares f64 scores exactly.
    let bitwise = |a: &[Vec<Hypothesis>], b: &[Vec<Hypothesis>]| {
        a.len() == b.len()
            && a.iter().zip(b).all(|(x, y)| {
                x.len() == y.len()
                    && x.iter().zip(y).all(|(p, q)| p.item == q.item && p.sid == q.sid && p.score.to_bits() == q.score.to_bits())
            })
    };
    let (top, _) = m_mode(ds, model, &hist, l, &cfg);
    out.push(Check::new(format!("m={l} equals teacher"), bitwise(&top, &teacher_only), ""));
    let (bottom, _) = m_mode(ds, model, &hist, 0, &cfg);
    out.push(Check::new("m=0 equals student", bitwise(&bottom, &student_only), ""));

    let trie = ds.catalog.trie();
    let rows: Vec<u64> = (0..l).map(|t| beam.min(trie.nodes_at(t)) as u64).collect();
    let n = hist.len() as u64;
    let span_rows: u64 = hist.iter().map(|h| (2 + l * h.len()) as u64).sum();
    for m in 1..l {
        let (_, c) = m_mode(ds, model, &hist, m, &cfg);
        let want_teacher = n * rows[..m].iter().sum::<u64>();
        let want_heads = n * rows[m..].iter().sum::<u64>();
        let ok = c.teacher_evals == want_teacher
            && c.head_evals == want_heads
            && c.context_computations == n
            && c.xattn_reads == span_rows
            && c.block_evals == 0;
        out.push(Check::new(
            format!("m={m} counters"),
            ok,
            format!(
                "teacher {}/{want_teacher} heads {}/{want_heads} ctx {}/{n} xattn {}/{span_rows}",
                c.teacher_evals, c.head_evals, c.context_computations, c.xattn_reads
            ),
        ));
    }
    out
}
