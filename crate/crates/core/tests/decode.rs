mod common;

use common::exact::{beam_exactness, m_mode_checks, random_student as student, small_dataset as small, test_histories as histories};
use proptest::prelude::*;
use sidmlp::catalog::{Catalog, SemanticId};
use sidmlp::decode::*;
use sidmlp::student::{teacher_digit_embeddings, MlpScorer, StudentConfig, StudentDecoder};
use sidmlp::{Result, Tensor};

#[test]
fn wide_beams_match_brute_force_top10() {
    let checks = beam_exactness(small(), 3);
    assert_eq!(checks.len(), 7);
    for c in checks {
        assert!(c.ok, "{}: {}", c.name, c.detail);
    }
}

/// Scores every digit equally.
struct Flat {
    c: usize,
}

impl StepScorer for Flat {
    fn step(&mut self, _t: usize, rows: &[BeamRow]) -> Result<StepLogits> {
        Ok(StepLogits {
            logits: Tensor::matrix(rows.len(), self.c, vec![0.0; rows.len() * self.c]),
            offset: 0,
        })
    }

    fn counters(&self) -> Counters {
        Counters::default()
    }
}

#[test]
fn ties_break_by_item_id() {
    let sids = [[1u16, 0], [0, 1], [1, 1], [0, 0], [2, 2]];
    let ids = [40u32, 7, 12, 99, 3];
    let items = ids.iter().zip(sids).map(|(&i, s)| (i, SemanticId::new(s.to_vec()))).collect();
    let cat = Catalog::build(2, 3, items).unwrap();
    let out = beam_search(&mut Flat { c: 3 }, &cat, 2, &DecodeConfig::new(5, 5)).unwrap();
    for hyps in &out {
        let got: Vec<u32> = hyps.iter().map(|h| h.item).collect();
        assert_eq!(got, vec![3, 7, 12, 40, 99]);
    }
}

#[test]
fn mask_conventions_agree_for_the_teacher() {
    // Teacher logits are log subtree masses, so renormalizing over the valid
    // digits changes nothing.
    let ds = small();
    let hist = histories(ds, 4);
    let mut a_cfg = DecodeConfig::new(20, 10);
    let mut runs = Vec::new();
    for mask in [MaskConvention::AfterSoftmax, MaskConvention::Renormalized] {
        a_cfg.mask = mask;
        let mut s = TeacherScorer::new(&ds.oracle, hist.clone());
        runs.push(beam_search(&mut s, &ds.catalog, hist.len(), &a_cfg).unwrap());
    }
    for (x, y) in runs[0].iter().zip(&runs[1]) {
        for (a, b) in x.iter().zip(y) {
            assert_eq!(a.item, b.item);
            assert!((a.score - b.score).abs() < 1e-9);
        }
    }
}

#[test]
fn renormalized_scores_sum_to_one_over_the_catalog() {
    let ds = small();
    let model = student(ds, 9);
    let h = ds.oracle.encode_history(histories(ds, 1)[0]).unwrap();
    let mut cfg = DecodeConfig::new(ds.catalog.len(), ds.catalog.len());
    cfg.mask = MaskConvention::Renormalized;
    let mut s = MlpScorer::new(&model, &[&h]).unwrap();
    let out = beam_search(&mut s, &ds.catalog, 1, &cfg).unwrap();
    let mass: f64 = out[0].iter().map(|h| h.score.exp()).sum();
    assert!((mass - 1.0).abs() < 1e-9, "{mass}");
    cfg.mask = MaskConvention::AfterSoftmax;
    let mut s = MlpScorer::new(&model, &[&h]).unwrap();
    let out = beam_search(&mut s, &ds.catalog, 1, &cfg).unwrap();
    let mass: f64 = out[0].iter().map(|h| h.score.exp()).sum();
    assert!(mass < 1.0);
}

#[test]
fn handoff_identities_and_counters() {
    let ds = small();
    let model = student(ds, 4);
    for beam in [10, 50] {
        let checks = m_mode_checks(ds, &model, 3, beam);
        assert_eq!(checks.len(), 5);
        for c in checks {
            assert!(c.ok, "B={beam} {}: {}", c.name, c.detail);
        }
    }
    let hist = histories(ds, 2);
    let st: Vec<Tensor> = hist.iter().map(|h| ds.oracle.encode_history(h).unwrap()).collect();
    let refs: Vec<&Tensor> = st.iter().collect();
    let mut t = TeacherScorer::new(&ds.oracle, hist.clone());
    let mut s = MlpScorer::new(&model, &refs).unwrap();
    assert!(m_mode_decode(&mut t, &mut s, &ds.catalog, 2, 5, &DecodeConfig::new(5, 5)).is_err());
}

#[test]
fn decode_config_validation() {
    assert!(DecodeConfig::new(0, 1).validate().is_err());
    assert!(DecodeConfig::new(5, 6).validate().is_err());
    assert!(DecodeConfig::new(5, 0).validate().is_err());
    assert!(DecodeConfig::new(5, 5).validate().is_ok());
}

#[test]
fn untrained_student_refuses_to_decode() {
    let ds = small();
    let mut tmpl = StudentConfig::new(4, 256, 64, 32);
    tmpl.seed = 1;
    let m = StudentDecoder::new(ds.student_config(&tmpl), Some(teacher_digit_embeddings(&ds.oracle))).unwrap();
    let h = ds.oracle.encode_history(histories(ds, 1)[0]).unwrap();
    assert!(MlpScorer::new(&m, &[&h]).is_err());
}

#[test]
fn decode_csv_layout() {
    let hyps = vec![vec![
        Hypothesis { sid: vec![0, 1], item: 5, score: -0.5 },
        Hypothesis { sid: vec![1, 1], item: 2, score: -1.25 },
    ]];
    let mut buf = Vec::new();
    write_decode_csv(&mut buf, &[17], &hyps).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "user_id,rank,item_id,score\n17,1,5,-0.5\n17,2,2,-1.25\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn beams_return_distinct_valid_sorted_items(user in 0usize..150, beam in 1usize..40, seed in 0u64..4) {
        let ds = small();
        let h = ds.split.test[user].history(&ds.records);
        let k = beam.min(10);
        let cfg = DecodeConfig::new(beam, k);
        let out = if seed == 0 {
            let mut s = TeacherScorer::new(&ds.oracle, vec![h]);
            beam_search(&mut s, &ds.catalog, 1, &cfg).unwrap()
        } else {
            let model = student(ds, seed);
            let st = ds.oracle.encode_history(h).unwrap();
            let mut s = MlpScorer::new(&model, &[&st]).unwrap();
            beam_search(&mut s, &ds.catalog, 1, &cfg).unwrap()
        };
        let hyps = &out[0];
        prop_assert_eq!(hyps.len(), k);
        for w in hyps.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].item < w[1].item));
        }
        let mut ids: Vec<u32> = hyps.iter().map(|h| h.item).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), k);
        for hy in hyps {
            prop_assert_eq!(ds.catalog.item_of_sid(&hy.sid).unwrap(), hy.item);
            prop_assert!(hy.score <= 0.0);
        }
    }
}
