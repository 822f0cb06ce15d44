//! Distillation training: the student decoder against the oracle's digit
//! logits, and the two-stage encoder recipe.

use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::ItemId;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_student, StudentPipeline};
use crate::graph::{Graph, Spans, MASKED_LOGIT};
use crate::metrics::EvalReport;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::student::{StudentDecoder, StudentEncoder};
use crate::synth::{DatasetSplit, Example, UserRecord};
use crate::tape::Tape;
use crate::teacher::OracleTeacher;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation cases scored after each epoch (0 = all).
    pub val_users: usize,
    /// Beam width of the per-epoch validation decode.
    pub val_beam: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.7,
            tau: 1.0,
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 30,
            batch_size: 256,
            seed: 42,
            val_users: 0,
            val_beam: 20,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha_tau(self.alpha, self.tau)?;
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.val_beam < 10 {
            return Err(Error::Config("val_beam must be at least 10 for NDCG@10".into()));
        }
        Ok(())
    }
}

fn check_alpha_tau(alpha: f64, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Mean over the batch of `sum_t alpha tau^2 KL + (1 - alpha) CE`.
///
/// `teacher[t]` is `N x W` with [`MASKED_LOGIT`] at invalid digits;
/// `targets[t][i]` is the logit column of the ground-truth digit.
pub fn distill_loss<G: Graph>(
    g: &mut G,
    logits: &[G::Var],
    teacher: &[Tensor],
    targets: &[Vec<usize>],
    alpha: f64,
    tau: f64,
) -> Result<G::Var> {
    check_alpha_tau(alpha, tau)?;
    if logits.is_empty() || logits.len() != teacher.len() || logits.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} logit steps, {} teacher steps, {} target steps",
            logits.len(),
            teacher.len(),
            targets.len()
        )));
    }
    let n = targets[0].len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut total: Option<G::Var> = None;
    for t in 0..logits.len() {
        let mut parts = Vec::with_capacity(2);
        if alpha > 0.0 {
            let kl = g.kl_div(&logits[t], &teacher[t], tau)?;
            parts.push(g.scale(&kl, alpha / n as f64)?);
        }
        if alpha < 1.0 {
            let ce = g.cross_entropy(&logits[t], &targets[t])?;
            parts.push(g.scale(&ce, (1.0 - alpha) / n as f64)?);
        }
        for p in parts {
            total = Some(match total {
                None => p,
                Some(acc) => g.add(&acc, &p)?,
            });
        }
    }
    Ok(total.unwrap())
}

/// Teacher digit logits along each training case's ground-truth SID,
/// stored sparsely as `(digit, logit)` over the valid digits.
#[derive(Clone, Debug, Default)]
pub struct TeacherTargets {
    cases: Vec<Vec<Vec<(u16, f64)>>>,
    sids: Vec<Vec<u16>>,
}

impl TeacherTargets {
    pub fn build(oracle: &OracleTeacher, records: &[UserRecord], examples: &[Example]) -> Result<Self> {
        let catalog = oracle.catalog();
        let l = catalog.depth();
        let mut cases = Vec::with_capacity(examples.len());
        let mut sids = Vec::with_capacity(examples.len());
        for ex in examples {
            let sid = catalog.sid_of_item(ex.target)?.digits().to_vec();
            let lp = oracle.next_item_log_probs(ex.history(records))?;
            let mass = oracle.prefix_log_mass(&lp);
            let mut steps = Vec::with_capacity(l);
            for t in 0..l {
                let row = oracle.digit_logits_from_mass(&mass, &sid[..t])?;
                steps.push(
                    row.iter()
                        .enumerate()
                        .filter(|(_, v)| **v > MASKED_LOGIT * 0.5)
                        .map(|(d, &v)| (d as u16, v))
                        .collect(),
                );
            }
            cases.push(steps);
            sids.push(sid);
        }
        Ok(TeacherTargets { cases, sids })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn sid(&self, i: usize) -> &[u16] {
        &self.sids[i]
    }

    /// Dense teacher tensors and target columns for the listed cases.
    pub fn batch(
        &self,
        idx: &[usize],
        width: usize,
        offset: impl Fn(usize) -> usize,
    ) -> (Vec<Tensor>, Vec<Vec<usize>>) {
        let l = self.sids.first().map(|s| s.len()).unwrap_or(0);
        let mut teacher = Vec::with_capacity(l);
        let mut targets = Vec::with_capacity(l);
        for t in 0..l {
            let off = offset(t);
            let mut data = vec![MASKED_LOGIT; idx.len() * width];
            let mut tg = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                for &(d, v) in &self.cases[i][t] {
                    data[r * width + off + d as usize] = v;
                }
                tg.push(off + self.sids[i][t] as usize);
            }
            teacher.push(Tensor::matrix(idx.len(), width, data));
            targets.push(tg);
        }
        (teacher, targets)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recall10: f64,
    pub val_ndcg10: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,train_loss,val_recall@10,val_ndcg@10,lr";

pub fn write_log<W: Write>(mut w: W, rows: &[LogRow]) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_recall10, r.val_ndcg10, r.lr
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val: EvalReport,
    pub steps: usize,
}

fn batch_states<G: Graph>(
    g: &mut G,
    oracle: &OracleTeacher,
    encoder: Option<(&StudentEncoder, bool)>,
    histories: &[&[ItemId]],
) -> Result<(G::Var, Spans)> {
    match encoder {
        None => {
            let states: Vec<Tensor> = histories
                .iter()
                .map(|h| oracle.encode_history(h))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = states.iter().collect();
            let (h, spans) = crate::student::stack_states(&refs)?;
            Ok((g.constant(h)?, spans))
        }
        Some((enc, frozen)) => {
            let seqs: Vec<Vec<usize>> = histories
                .iter()
                .map(|h| oracle.serialize(h))
                .collect::<Result<_>>()?;
            let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
            enc.forward(g, &refs, frozen)
        }
    }
}

fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged { epoch, step, loss }
}

/// Shared loop for all decoder training recipes. With `encoder` set to a
/// trainable encoder, both models are optimized jointly.
fn fit(
    decoder: &mut StudentDecoder,
    mut encoder: Option<(&mut StudentEncoder, bool)>,
    oracle: &OracleTeacher,
    records: &[UserRecord],
    split: &DatasetSplit,
    targets: &TeacherTargets,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::invalid("no training cases"));
    }
    if targets.len() != split.train.len() {
        return Err(Error::invalid("teacher targets do not match the training cases"));
    }
    let catalog = oracle.catalog().clone();
    let scfg = decoder.config().clone();
    let width = scfg.output_width();
    let n = split.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let horizon = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(decoder.params(), cfg.lr, cfg.weight_decay, horizon as u64);
    let mut enc_opt = match &encoder {
        Some((e, false)) => Some(AdamW::new(e.params(), cfg.lr, cfg.weight_decay, horizon as u64)),
        _ => None,
    };
    let val: Vec<Example> = if cfg.val_users == 0 {
        split.val.clone()
    } else {
        split.val.iter().take(cfg.val_users).copied().collect()
    };
    let dcfg = DecodeConfig::new(cfg.val_beam, 10);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, EvalReport, ParamStore, Option<ParamStore>)> = None;
    let mut step = 0;
    decoder.mark_trained();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = opt.current_lr();
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let hist: Vec<&[ItemId]> = chunk.iter().map(|&i| split.train[i].history(records)).collect();
            let sids: Vec<&[u16]> = chunk.iter().map(|&i| targets.sid(i)).collect();
            let (teacher, tg) = targets.batch(chunk, width, |t| scfg.logit_offset(t));
            let mut tape = Tape::training(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64));
            let enc_view = encoder.as_ref().map(|(e, frozen)| (&**e, *frozen));
            let result = (|| {
                let (h, spans) = batch_states(&mut tape, oracle, enc_view, &hist)?;
                let logits = decoder.forward_teacher_forced(&mut tape, &h, &spans, &sids)?;
                distill_loss(&mut tape, &logits, &teacher, &tg, cfg.alpha, cfg.tau)
            })();
            let loss = match result {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, step, f64::NAN)),
                Err(e) => return Err(e),
            };
            let lv = tape.value(&loss).item().unwrap();
            if !lv.is_finite() {
                return Err(diverged(epoch, step, lv));
            }
            let grads = tape.backward(loss)?;
            match opt.step(decoder.params_mut(), &grads) {
                Err(Error::NanGradient(_)) => return Err(diverged(epoch, step, lv)),
                r => r?,
            }
            if let (Some(o), Some((e, _))) = (enc_opt.as_mut(), encoder.as_mut()) {
                match o.step(e.params_mut(), &grads) {
                    Err(Error::NanGradient(_)) => return Err(diverged(epoch, step, lv)),
                    r => r?,
                }
            }
            loss_sum += lv * chunk.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        let mut pipe = StudentPipeline::new(oracle, decoder);
        if let Some((e, _)) = &encoder {
            pipe = pipe.with_encoder(e);
        }
        let report = evaluate_student(&pipe, &catalog, records, &val, &dcfg, 64)?;
        info!(
            "epoch {epoch}: loss {train_loss:.5} val NDCG@10 {:.4} Recall@10 {:.4}",
            report.ndcg10, report.recall10
        );
        log.push(LogRow {
            epoch,
            train_loss,
            val_recall10: report.recall10,
            val_ndcg10: report.ndcg10,
            lr,
        });
        if best.as_ref().is_none_or(|b| report.ndcg10 > b.0) {
            let enc_snap = match &encoder {
                Some((e, false)) => Some(e.params().clone()),
                _ => None,
            };
            best = Some((report.ndcg10, epoch, report, decoder.params().clone(), enc_snap));
        }
    }
    let (_, best_epoch, best_val, dec_store, enc_store) = best.unwrap();
    *decoder.params_mut() = dec_store;
    if let (Some(s), Some((e, _))) = (enc_store, encoder.as_mut()) {
        *e.params_mut() = s;
    }
    Ok(TrainReport {
        log,
        best_epoch,
        best_val,
        steps: step,
    })
}

/// Trains the decoder on the oracle's encoder states and restores the
/// epoch with the best validation NDCG@10.
pub fn train_student(
    decoder: &mut StudentDecoder,
    oracle: &OracleTeacher,
    records: &[UserRecord],
    split: &DatasetSplit,
    targets: &TeacherTargets,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    fit(decoder, None, oracle, records, split, targets, cfg)
}

/// Stage 2: the decoder learns on top of a frozen student encoder.
pub fn train_encoder_stage2(
    decoder: &mut StudentDecoder,
    encoder: &mut StudentEncoder,
    oracle: &OracleTeacher,
    records: &[UserRecord],
    split: &DatasetSplit,
    targets: &TeacherTargets,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    fit(decoder, Some((encoder, true)), oracle, records, split, targets, cfg)
}

/// Encoder and decoder trained jointly from scratch on the distillation loss.
pub fn train_end_to_end(
    decoder: &mut StudentDecoder,
    encoder: &mut StudentEncoder,
    oracle: &OracleTeacher,
    records: &[UserRecord],
    split: &DatasetSplit,
    targets: &TeacherTargets,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    fit(decoder, Some((encoder, false)), oracle, records, split, targets, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 64,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Report {
    /// Per-token MSE of the untrained encoder.
    pub initial_mse: f64,
    /// Average training MSE of each epoch.
    pub epoch_mse: Vec<f64>,
}

/// The per-user stream Stage 1 regresses: the test-time input sequence,
/// which holds no test target.
pub fn stage1_sequences(records: &[UserRecord], split: &DatasetSplit) -> Vec<Vec<ItemId>> {
    split
        .test
        .iter()
        .map(|ex| ex.history(records).to_vec())
        .collect()
}

fn encoder_mse<G: Graph>(
    g: &mut G,
    enc: &StudentEncoder,
    oracle: &OracleTeacher,
    histories: &[&[ItemId]],
) -> Result<G::Var> {
    let seqs: Vec<Vec<usize>> = histories.iter().map(|h| oracle.serialize(h)).collect::<Result<_>>()?;
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let (x, _) = enc.forward(g, &refs, false)?;
    let states: Vec<Tensor> = seqs.iter().map(|s| oracle.encode(s)).collect::<Result<_>>()?;
    let srefs: Vec<&Tensor> = states.iter().collect();
    let (target, _) = crate::student::stack_states(&srefs)?;
    let rows: Vec<usize> = (0..target.rows()).collect();
    g.mse(&x, &target, &rows)
}

/// Stage 1: regress the oracle's encoder states token by token. Stops
/// early after two consecutive epochs without improvement.
pub fn train_encoder_stage1(
    encoder: &mut StudentEncoder,
    oracle: &OracleTeacher,
    histories: &[Vec<ItemId>],
    cfg: &EncoderTrainConfig,
) -> Result<Stage1Report> {
    if histories.is_empty() {
        return Err(Error::invalid("no sequences for encoder training"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("encoder training needs epochs, batch_size and lr > 0".into()));
    }
    let all: Vec<&[ItemId]> = histories.iter().map(|h| h.as_slice()).collect();
    let mut initial = 0.0;
    let mut weight = 0usize;
    for chunk in all.chunks(256) {
        let v = encoder_mse(&mut crate::graph::Eval, encoder, oracle, chunk)?;
        let rows: usize = chunk.iter().map(|h| 2 + oracle.catalog().depth() * h.len()).sum();
        initial += v.item().unwrap() * rows as f64;
        weight += rows;
    }
    let initial_mse = initial / weight as f64;
    let per_epoch = all.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(encoder.params(), cfg.lr, cfg.weight_decay, (per_epoch * cfg.epochs) as u64);
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_mse = Vec::new();
    let mut stall = 0;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut rows_seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let hist: Vec<&[ItemId]> = chunk.iter().map(|&i| all[i]).collect();
            let mut tape = Tape::new();
            let loss = match encoder_mse(&mut tape, encoder, oracle, &hist) {
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, step, f64::NAN)),
                r => r?,
            };
            let lv = tape.value(&loss).item().unwrap();
            let grads = tape.backward(loss)?;
            match opt.step(encoder.params_mut(), &grads) {
                Err(Error::NanGradient(_)) => return Err(diverged(epoch, step, lv)),
                r => r?,
            }
            let rows: usize = hist.iter().map(|h| 2 + oracle.catalog().depth() * h.len()).sum();
            sum += lv * rows as f64;
            rows_seen += rows;
            step += 1;
        }
        let m = sum / rows_seen as f64;
        info!("encoder epoch {epoch}: MSE {m:.6}");
        let improved = epoch_mse.last().is_none_or(|&p: &f64| m < p);
        epoch_mse.push(m);
        if improved {
            stall = 0;
        } else {
            stall += 1;
            if stall >= 2 {
                break;
            }
        }
    }
    Ok(Stage1Report {
        initial_mse,
        epoch_mse,
    })
}
