//! Constrained beam search over the prefix trie.
//!
//! The search is generic over a [`StepScorer`] that produces one logit row
//! per active beam; the MLP student, the oracle teacher and the reference
//! Transformer all plug in here, as does the m-mode hybrid.

use std::io::Write;
use std::ops::AddAssign;

use crate::catalog::{Catalog, ItemId};
use crate::error::{Error, Result};
use crate::kernels;
use crate::teacher::oracle::{OracleTeacher, PrefixMass};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskConvention {
    /// Normalize over the full logit width, then drop invalid digits.
    #[default]
    AfterSoftmax,
    /// Normalize over the valid digits only.
    Renormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub k: usize,
    pub mask: MaskConvention,
}

impl DecodeConfig {
    pub fn new(beam: usize, k: usize) -> Self {
        DecodeConfig {
            beam,
            k,
            mask: MaskConvention::AfterSoftmax,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        if self.k < 1 || self.k > self.beam {
            return Err(Error::invalid(format!(
                "cutoff K={} must lie in 1..=B ({})",
                self.k, self.beam
            )));
        }
        Ok(())
    }
}

/// Work counters accumulated by scorers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub context_computations: u64,
    pub head_evals: u64,
    pub block_evals: u64,
    pub xattn_reads: u64,
    pub self_attn_positions: u64,
    pub kv_bytes_moved: u64,
    pub teacher_evals: u64,
}

impl AddAssign for Counters {
    fn add_assign(&mut self, o: Counters) {
        self.context_computations += o.context_computations;
        self.head_evals += o.head_evals;
        self.block_evals += o.block_evals;
        self.xattn_reads += o.xattn_reads;
        self.self_attn_positions += o.self_attn_positions;
        self.kv_bytes_moved += o.kv_bytes_moved;
        self.teacher_evals += o.teacher_evals;
    }
}

/// An active beam as seen by a scorer.
#[derive(Clone, Debug)]
pub struct BeamRow {
    /// Slot of the user within the decoded batch.
    pub user: usize,
    /// Row index of this beam's parent in the previous step (0 at step 0).
    pub parent: usize,
    pub prefix: Vec<u16>,
}

/// Logits for every active beam; digit `c` lives at column `offset + c`.
pub struct StepLogits {
    pub logits: Tensor,
    pub offset: usize,
}

pub trait StepScorer {
    /// Produces logits for digit `t + 1` (0-based `t` = prefix length).
    fn step(&mut self, t: usize, rows: &[BeamRow]) -> Result<StepLogits>;
    fn counters(&self) -> Counters;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub sid: Vec<u16>,
    pub item: ItemId,
    pub score: f64,
}

#[derive(Clone)]
struct Beam {
    prefix: Vec<u16>,
    score: f64,
}

/// Beam search for `users` users at once. Returns, per user, up to `K`
/// full SIDs ordered by (score desc, item id asc).
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    catalog: &Catalog,
    users: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    cfg.validate()?;
    let trie = catalog.trie();
    let l = catalog.depth();
    let c = catalog.codebook();
    let mut beams: Vec<Vec<Beam>> = vec![
        vec![Beam {
            prefix: Vec::new(),
            score: 0.0,
        }];
        users
    ];
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); users];
    if users == 0 {
        return Ok(finished);
    }
    let mut parent_rows: Vec<Vec<usize>> = vec![vec![0]; users];
    for t in 0..l {
        let mut rows = Vec::new();
        for (u, bs) in beams.iter().enumerate() {
            for (b, beam) in bs.iter().enumerate() {
                rows.push(BeamRow {
                    user: u,
                    parent: parent_rows[u][b],
                    prefix: beam.prefix.clone(),
                });
            }
        }
        let out = scorer.step(t, &rows)?;
        if out.logits.rows() != rows.len() || out.offset + c > out.logits.cols() {
            return Err(Error::shape(
                "beam_search",
                format!(
                    "scorer returned {:?} for {} beams (offset {})",
                    out.logits.shape(),
                    rows.len(),
                    out.offset
                ),
            ));
        }
        let mut row = 0;
        let mut next_beams = Vec::with_capacity(users);
        let mut next_parents = Vec::with_capacity(users);
        for (u, bs) in beams.iter().enumerate() {
            let mut cands: Vec<(f64, Vec<u16>, usize)> = Vec::new();
            for beam in bs {
                let logits = out.logits.row_slice(row);
                let node = trie
                    .node(&beam.prefix)
                    .ok_or_else(|| Error::InvalidPrefix(beam.prefix.clone()))?;
                let kids = trie.children(t, node);
                let norm = match cfg.mask {
                    MaskConvention::AfterSoftmax => kernels::log_sum_exp(logits),
                    MaskConvention::Renormalized => {
                        let valid: Vec<f64> =
                            kids.iter().map(|&(d, _)| logits[out.offset + d as usize]).collect();
                        kernels::log_sum_exp(&valid)
                    }
                };
                for &(d, _) in kids {
                    let lp = logits[out.offset + d as usize] - norm;
                    let mut p = beam.prefix.clone();
                    p.push(d);
                    cands.push((beam.score + lp, p, row));
                }
                row += 1;
            }
            if t + 1 < l {
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                cands.truncate(cfg.beam);
                next_parents.push(cands.iter().map(|c| c.2).collect());
                next_beams.push(
                    cands
                        .into_iter()
                        .map(|(score, prefix, _)| Beam { prefix, score })
                        .collect(),
                );
            } else {
                let mut hyps: Vec<Hypothesis> = cands
                    .into_iter()
                    .map(|(score, sid, _)| {
                        let item = catalog.item_of_sid(&sid)?;
                        Ok(Hypothesis { sid, item, score })
                    })
                    .collect::<Result<_>>()?;
                hyps.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
                hyps.truncate(cfg.beam.min(cfg.k));
                finished[u] = hyps;
            }
        }
        if t + 1 < l {
            beams = next_beams;
            parent_rows = next_parents;
        }
    }
    Ok(finished)
}

/// Item ids of the first `k` hypotheses, order preserved.
pub fn decode_topk_items(ranked: &[Hypothesis], k: usize) -> Vec<ItemId> {
    ranked.iter().take(k).map(|h| h.item).collect()
}

/// Oracle teacher as a step scorer: digit logits are exact log subtree
/// masses of the next-item law.
pub struct TeacherScorer<'a> {
    oracle: &'a OracleTeacher,
    histories: Vec<&'a [ItemId]>,
    masses: Vec<Option<PrefixMass>>,
    counters: Counters,
}

impl<'a> TeacherScorer<'a> {
    pub fn new(oracle: &'a OracleTeacher, histories: Vec<&'a [ItemId]>) -> Self {
        let n = histories.len();
        TeacherScorer {
            oracle,
            histories,
            masses: vec![None; n],
            counters: Counters::default(),
        }
    }
}

impl StepScorer for TeacherScorer<'_> {
    fn step(&mut self, _t: usize, rows: &[BeamRow]) -> Result<StepLogits> {
        let c = self.oracle.catalog().codebook();
        let mut data = Vec::with_capacity(rows.len() * c);
        for r in rows {
            if self.masses[r.user].is_none() {
                let lp = self.oracle.next_item_log_probs(self.histories[r.user])?;
                self.masses[r.user] = Some(self.oracle.prefix_log_mass(&lp));
            }
            let mass = self.masses[r.user].as_ref().unwrap();
            data.extend(self.oracle.digit_logits_from_mass(mass, &r.prefix)?);
        }
        self.counters.teacher_evals += rows.len() as u64;
        Ok(StepLogits {
            logits: Tensor::matrix(rows.len(), c, data),
            offset: 0,
        })
    }

    fn counters(&self) -> Counters {
        self.counters
    }
}

/// Hands steps `0..m` to `first` and the rest to `second`.
pub struct HandoffScorer<'a> {
    pub first: &'a mut dyn StepScorer,
    pub second: &'a mut dyn StepScorer,
    pub m: usize,
}

impl StepScorer for HandoffScorer<'_> {
    fn step(&mut self, t: usize, rows: &[BeamRow]) -> Result<StepLogits> {
        if t < self.m {
            self.first.step(t, rows)
        } else {
            self.second.step(t, rows)
        }
    }

    fn counters(&self) -> Counters {
        let mut c = self.first.counters();
        c += self.second.counters();
        c
    }
}

/// Teacher expands the first `m` digits, the student the remaining ones.
pub fn m_mode_decode(
    teacher: &mut dyn StepScorer,
    student: &mut dyn StepScorer,
    catalog: &Catalog,
    users: usize,
    m: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    if m > catalog.depth() {
        return Err(Error::invalid(format!(
            "m={m} outside 0..={}",
            catalog.depth()
        )));
    }
    let mut s = HandoffScorer {
        first: teacher,
        second: student,
        m,
    };
    beam_search(&mut s, catalog, users, cfg)
}

/// Writes `user_id,rank,item_id,score` rows (rank is 1-based).
pub fn write_decode_csv<W: Write>(
    mut w: W,
    users: &[u32],
    ranked: &[Vec<Hypothesis>],
) -> Result<()> {
    writeln!(w, "user_id,rank,item_id,score")?;
    for (u, hyps) in users.iter().zip(ranked) {
        for (r, h) in hyps.iter().enumerate() {
            writeln!(w, "{},{},{},{}", u, r + 1, h.item, h.score)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::SemanticId;

    /// Fixed logits per step, independent of the prefix.
    struct Fixed(Vec<Vec<f64>>);

    impl StepScorer for Fixed {
        fn step(&mut self, t: usize, rows: &[BeamRow]) -> Result<StepLogits> {
            let c = self.0[t].len();
            let mut d = Vec::new();
            for _ in rows {
                d.extend_from_slice(&self.0[t]);
            }
            Ok(StepLogits {
                logits: Tensor::matrix(rows.len(), c, d),
                offset: 0,
            })
        }
        fn counters(&self) -> Counters {
            Counters::default()
        }
    }

    fn cat() -> Catalog {
        let sids = [[0u16, 0], [0, 1], [1, 0], [2, 1], [2, 2]];
        Catalog::build(
            2,
            3,
            sids.iter()
                .enumerate()
                .map(|(i, s)| (i as u32, SemanticId::new(s.to_vec())))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn greedy_with_beam_one() {
        let catalog = cat();
        let mut s = Fixed(vec![vec![0.0, 1.0, 2.0], vec![3.0, 0.0, 0.5]]);
        let out = beam_search(&mut s, &catalog, 1, &DecodeConfig::new(1, 1)).unwrap();
        // digit 2 first, then the better of its children {1, 2}
        assert_eq!(out[0][0].sid, vec![2, 2]);
    }

    #[test]
    fn only_valid_items_are_emitted() {
        let catalog = cat();
        let mut s = Fixed(vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let out = beam_search(&mut s, &catalog, 2, &DecodeConfig::new(10, 10)).unwrap();
        assert_eq!(out[0].len(), 5);
        // all scores tie at log(1/9): item id order decides
        let ids: Vec<u32> = out[0].iter().map(|h| h.item).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(decode_topk_items(&out[1], 2), vec![0, 1]);
    }

    #[test]
    fn renormalized_scores_sum_to_one() {
        let catalog = cat();
        let mut s = Fixed(vec![vec![0.3, -1.0, 2.0], vec![1.0, 0.0, 0.5]]);
        let cfg = DecodeConfig {
            beam: 10,
            k: 10,
            mask: MaskConvention::Renormalized,
        };
        let out = beam_search(&mut s, &catalog, 1, &cfg).unwrap();
        let total: f64 = out[0].iter().map(|h| h.score.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let catalog = cat();
        let mut s = Fixed(vec![vec![0.0; 3], vec![0.0; 3]]);
        assert!(beam_search(&mut s, &catalog, 1, &DecodeConfig::new(0, 1)).is_err());
        assert!(beam_search(&mut s, &catalog, 1, &DecodeConfig::new(2, 3)).is_err());
    }
}
