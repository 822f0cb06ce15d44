mod common;

use std::collections::HashMap;

use common::{check_gradients, random_matrix};
use sidmlp::graph::{Eval, Graph};
use sidmlp::student::{assign_roles, EncoderConfig, StudentEncoder, Vocab};
use sidmlp::{Error, Tape, Tensor};

const VOCAB: Vocab = Vocab { l: 4, c: 6 };
const D_H: usize = 5;
const D_E: usize = 3;

fn cfg(depth: usize) -> EncoderConfig {
    let mut c = EncoderConfig::new(D_H, D_E);
    c.depth = depth;
    c.width = 7;
    c.max_len = 40;
    c
}

fn encoder(depth: usize) -> StudentEncoder {
    StudentEncoder::new(cfg(depth), VOCAB, random_matrix(VOCAB.size(), D_E, 1)).unwrap()
}

fn stream(items: &[[u16; 4]]) -> Vec<usize> {
    let mut s = vec![VOCAB.user()];
    for it in items {
        for (t, &d) in it.iter().enumerate() {
            s.push(t * VOCAB.c + d as usize);
        }
    }
    s.push(VOCAB.eos());
    s
}

#[test]
fn one_item_roles() {
    assert_eq!(assign_roles(&stream(&[[1, 2, 3, 4]]), VOCAB).unwrap(), vec![4, 1, 2, 3, 4, 4]);
}

#[test]
fn two_item_roles_repeat() {
    let r = assign_roles(&stream(&[[1, 2, 3, 4], [0, 0, 0, 0]]), VOCAB).unwrap();
    assert_eq!(r, vec![4, 1, 2, 3, 4, 1, 2, 3, 4, 4]);
}

#[test]
fn malformed_stream_reports_position() {
    let mut s = stream(&[[1, 2, 3, 4], [0, 0, 0, 0]]);
    s[6] = VOCAB.c * 2; // a position-3 token where position 2 belongs
    match assign_roles(&s, VOCAB) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
        other => panic!("{other:?}"),
    }
    let mut s = stream(&[[1, 2, 3, 4]]);
    s.remove(3);
    assert!(assign_roles(&s, VOCAB).is_err());
    assert!(assign_roles(&[VOCAB.eos()], VOCAB).is_err());
}

#[test]
fn unknown_token_rejected() {
    let e = encoder(1);
    let mut s = stream(&[[1, 2, 3, 4]]);
    s[2] = 10_000;
    assert!(e.encode(&s).is_err());
}

fn initial_states(e: &StudentEncoder, toks: &[usize]) -> Vec<Vec<f64>> {
    let p = e.params();
    let emb = random_matrix(VOCAB.size(), D_E, 1);
    let (w, b, pos) = (
        p.by_name("enc.proj.w").unwrap(),
        p.by_name("enc.proj.b").unwrap(),
        p.by_name("enc.pos").unwrap(),
    );
    toks.iter()
        .enumerate()
        .map(|(i, &tok)| {
            (0..D_H)
                .map(|j| {
                    let mut v = b.data()[j] + pos.get(i, j);
                    for k in 0..D_E {
                        v += emb.get(tok, k) * w.get(k, j);
                    }
                    v
                })
                .collect()
        })
        .collect()
}

/// Plain-loop evaluation of the residual role-MLP stack.
fn scalar_encode(e: &StudentEncoder, toks: &[usize]) -> Vec<Vec<f64>> {
    let p = e.params();
    let roles = assign_roles(toks, VOCAB).unwrap();
    let mut x = initial_states(e, toks);
    let n = x.len();
    for r in 0..e.config().depth {
        let g: Vec<f64> = (0..D_H).map(|j| x.iter().map(|row| row[j]).sum::<f64>() / n as f64).collect();
        let mut next = x.clone();
        for i in 0..n {
            let name = format!("enc.l{r}.f{}", roles[i]);
            let w1 = p.by_name(&format!("{name}.hidden.w")).unwrap();
            let b1 = p.by_name(&format!("{name}.hidden.b")).unwrap();
            let w2 = p.by_name(&format!("{name}.out.w")).unwrap();
            let b2 = p.by_name(&format!("{name}.out.b")).unwrap();
            let inp: Vec<f64> = x[i].iter().chain(&g).copied().collect();
            let hid: Vec<f64> = (0..w1.cols())
                .map(|k| {
                    let v: f64 = (0..inp.len()).map(|a| inp[a] * w1.get(a, k)).sum::<f64>() + b1.data()[k];
                    v.max(0.0)
                })
                .collect();
            for j in 0..D_H {
                let u: f64 = (0..hid.len()).map(|k| hid[k] * w2.get(k, j)).sum::<f64>() + b2.data()[j];
                next[i][j] += u;
            }
        }
        x = next;
    }
    x
}

#[test]
fn matches_scalar_two_layer_encoder() {
    let e = encoder(2);
    let toks = stream(&[[1, 2, 3, 4], [5, 0, 2, 1], [0, 0, 0, 3]]);
    let out = e.encode(&toks).unwrap();
    let want = scalar_encode(&e, &toks);
    for (i, row) in want.iter().enumerate() {
        for j in 0..D_H {
            assert!((out.get(i, j) - row[j]).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_role_outputs_give_identity() {
    let mut e = encoder(3);
    e.zero_role_outputs();
    let toks = stream(&[[1, 2, 3, 4], [2, 2, 2, 2]]);
    let out = e.encode(&toks).unwrap();
    let x0 = initial_states(&e, &toks);
    for (i, row) in x0.iter().enumerate() {
        for j in 0..D_H {
            assert!((out.get(i, j) - row[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_changes_nothing() {
    let e = encoder(2);
    let toks = stream(&[[1, 2, 3, 4], [5, 0, 2, 1]]);
    let plain = e.encode(&toks).unwrap();
    let mut padded = toks.clone();
    padded.extend([VOCAB.pad(); 7]);
    let out = e.encode(&padded).unwrap();
    assert_eq!(out.rows(), padded.len());
    for i in 0..toks.len() {
        for j in 0..D_H {
            assert_eq!(out.get(i, j).to_bits(), plain.get(i, j).to_bits());
        }
    }
    for i in toks.len()..padded.len() {
        assert!(out.row_slice(i).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn shared_roles_use_one_mlp() {
    let mut c = cfg(2);
    c.shared_roles = true;
    let e = StudentEncoder::new(c, VOCAB, random_matrix(VOCAB.size(), D_E, 1)).unwrap();
    assert!(e.params().by_name("enc.l0.f2.hidden.w").is_none());
    let toks = stream(&[[1, 2, 3, 4]]);
    assert_eq!(e.encode(&toks).unwrap().rows(), toks.len());
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut e = encoder(2);
    let seqs = [stream(&[[1, 2, 3, 4]]), stream(&[[5, 0, 2, 1], [0, 1, 0, 1]])];
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let rows = seqs.iter().map(|s| s.len()).sum();
    let target = random_matrix(rows, D_H, 3);
    let all: Vec<usize> = (0..rows).collect();
    let mut tape = Tape::new();
    let (x, _) = e.forward(&mut tape, &refs, false).unwrap();
    let loss = tape.mse(&x, &target, &all).unwrap();
    let grads = tape.backward(loss).unwrap();
    let by_name: HashMap<String, Vec<f64>> = e
        .params()
        .ids()
        .filter_map(|id| grads.param(id).map(|g| (e.params().name(id).to_string(), g.to_vec())))
        .collect();
    check_gradients(
        &mut e,
        StudentEncoder::params_mut,
        |e| {
            let (x, _) = e.forward(&mut Eval, &refs, true).unwrap();
            Eval.mse(&x, &target, &all).unwrap().item().unwrap()
        },
        |n| by_name.get(n).cloned(),
        4,
        1e-4,
    );
}

#[test]
fn frozen_forward_sends_no_gradient() {
    let e = encoder(1);
    let s = stream(&[[1, 2, 3, 4]]);
    let mut tape = Tape::new();
    let (x, _) = e.forward(&mut tape, &[&s], true).unwrap();
    let v = tape.variable(Tensor::zeros(&[1])).unwrap();
    let l = tape.sum(&x).unwrap();
    let l = tape.add(&l, &v).unwrap();
    let grads = tape.backward(l).unwrap();
    assert_eq!(grads.params().count(), 0);
}
