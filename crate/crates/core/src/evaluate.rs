//! Batched decoding and metric evaluation for the teacher and student paths.

use crate::catalog::{Catalog, ItemId};
use crate::decode::{beam_search, Counters, DecodeConfig, Hypothesis, StepScorer, TeacherScorer};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MetricAccumulator};
use crate::student::{MlpScorer, StudentDecoder, StudentEncoder};
use crate::synth::{Example, UserRecord};
use crate::teacher::OracleTeacher;
use crate::tensor::Tensor;

/// A student decoder fed either by the teacher's encoder states or by a
/// student encoder.
#[derive(Clone, Copy)]
pub struct StudentPipeline<'a> {
    pub oracle: &'a OracleTeacher,
    pub decoder: &'a StudentDecoder,
    pub encoder: Option<&'a StudentEncoder>,
}

impl<'a> StudentPipeline<'a> {
    pub fn new(oracle: &'a OracleTeacher, decoder: &'a StudentDecoder) -> Self {
        StudentPipeline {
            oracle,
            decoder,
            encoder: None,
        }
    }

    pub fn with_encoder(mut self, encoder: &'a StudentEncoder) -> Self {
        self.encoder = Some(encoder);
        self
    }

    /// Encoder states for one history.
    pub fn states(&self, history: &[ItemId]) -> Result<Tensor> {
        match self.encoder {
            None => self.oracle.encode_history(history),
            Some(enc) => enc.encode(&self.oracle.serialize(history)?),
        }
    }

    /// Beam-decodes a batch of histories.
    pub fn decode(
        &self,
        catalog: &Catalog,
        histories: &[&[ItemId]],
        cfg: &DecodeConfig,
    ) -> Result<(Vec<Vec<Hypothesis>>, Counters)> {
        let states: Vec<Tensor> = histories.iter().map(|h| self.states(h)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = states.iter().collect();
        let mut scorer = MlpScorer::new(self.decoder, &refs)?;
        let out = beam_search(&mut scorer, catalog, histories.len(), cfg)?;
        Ok((out, scorer.counters()))
    }
}

fn accumulate(
    records: &[UserRecord],
    examples: &[Example],
    batch: usize,
    mut decode: impl FnMut(&[&[ItemId]]) -> Result<Vec<Vec<Hypothesis>>>,
) -> Result<EvalReport> {
    if batch == 0 {
        return Err(Error::invalid("evaluation batch size must be positive"));
    }
    let mut acc = MetricAccumulator::new();
    for chunk in examples.chunks(batch) {
        let hist: Vec<&[ItemId]> = chunk.iter().map(|e| e.history(records)).collect();
        let ranked = decode(&hist)?;
        for (ex, hyps) in chunk.iter().zip(&ranked) {
            let items: Vec<ItemId> = hyps.iter().map(|h| h.item).collect();
            acc.add(&items, ex.target);
        }
    }
    Ok(acc.finish())
}

pub fn evaluate_student(
    pipeline: &StudentPipeline,
    catalog: &Catalog,
    records: &[UserRecord],
    examples: &[Example],
    cfg: &DecodeConfig,
    batch: usize,
) -> Result<EvalReport> {
    accumulate(records, examples, batch, |hist| {
        Ok(pipeline.decode(catalog, hist, cfg)?.0)
    })
}

/// The oracle teacher decoded with the same constrained beam search.
pub fn evaluate_teacher(
    oracle: &OracleTeacher,
    records: &[UserRecord],
    examples: &[Example],
    cfg: &DecodeConfig,
    batch: usize,
) -> Result<EvalReport> {
    let catalog = oracle.catalog().clone();
    accumulate(records, examples, batch, |hist| {
        let mut scorer = TeacherScorer::new(oracle, hist.to_vec());
        beam_search(&mut scorer, &catalog, hist.len(), cfg)
    })
}
