//! Throughput, peak-memory and work-counter measurements for the decode paths.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::catalog::{Catalog, ItemId, PrefixTrie};
use crate::decode::{beam_search, Counters, DecodeConfig, Hypothesis, StepScorer, TeacherScorer};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, MetricAccumulator};
use crate::student::{MlpScorer, StudentDecoder, StudentEncoder};
use crate::synth::{Example, UserRecord};
use crate::teacher::{OracleTeacher, ReferenceDecoder, ReferenceScorer};
use crate::tensor::{alloc_stats, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchPath {
    /// Teacher encoder states + MLP student decoder.
    Mlp,
    /// Oracle teacher digit logits.
    Teacher,
    /// Teacher encoder states + KV-cached Transformer decoder.
    Reference,
    /// Student encoder + MLP student decoder.
    MethodPP,
}

impl BenchPath {
    pub const ALL: [BenchPath; 4] = [BenchPath::Mlp, BenchPath::Teacher, BenchPath::Reference, BenchPath::MethodPP];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchPath::Mlp => "mlp",
            BenchPath::Teacher => "teacher",
            BenchPath::Reference => "reference",
            BenchPath::MethodPP => "methodpp",
        }
    }
}

impl fmt::Display for BenchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BenchPath::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown path {s:?} (expected mlp, teacher, reference or methodpp)")))
    }
}

/// The models a benchmark may call on. Paths whose model is missing fail.
#[derive(Clone, Copy)]
pub struct BenchModels<'a> {
    pub oracle: &'a OracleTeacher,
    pub decoder: Option<&'a StudentDecoder>,
    pub encoder: Option<&'a StudentEncoder>,
    pub reference: Option<&'a ReferenceDecoder>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub batch: usize,
    pub beam: usize,
    pub k: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Worker threads for batch-parallel decoding; 1 keeps timing stable.
    pub workers: usize,
}

impl BenchOptions {
    pub fn new(batch: usize, beam: usize) -> Self {
        BenchOptions {
            batch,
            beam,
            k: 10.min(beam),
            repetitions: 1,
            warmup: 2,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub path: BenchPath,
    /// Sweep axis ("batch", "beam" or "point" for a single run).
    pub axis: String,
    pub value: usize,
    pub samples_per_s: f64,
    pub ms_per_sample: f64,
    pub speedup: f64,
    pub peak_bytes: usize,
    pub ctx_count: u64,
    pub head_evals: u64,
    pub block_evals: u64,
    pub xattn_reads: u64,
    /// Throughput of the post-encoder region alone.
    pub decode_samples_per_s: f64,
    pub batch: usize,
    pub beam: usize,
    pub users: usize,
    pub ndcg10: f64,
}

pub const BENCH_CSV_HEADER: &str = "path,axis,value,samples_per_s,ms_per_sample,speedup,peak_bytes,ctx_count,head_evals,block_evals,xattn_reads,decode_samples_per_s,batch,beam,users,ndcg10";

impl BenchResult {
    pub fn csv_row(&self) -> String {
        // `{:?}` on f64 prints the shortest string that parses back exactly.
        format!(
            "{},{},{},{:?},{:?},{:?},{},{},{},{},{},{:?},{},{},{},{:?}",
            self.path,
            self.axis,
            self.value,
            self.samples_per_s,
            self.ms_per_sample,
            self.speedup,
            self.peak_bytes,
            self.ctx_count,
            self.head_evals,
            self.block_evals,
            self.xattn_reads,
            self.decode_samples_per_s,
            self.batch,
            self.beam,
            self.users,
            self.ndcg10
        )
    }

    pub fn parse_row(line: &str, lineno: usize) -> Result<BenchResult> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = |msg: String| Error::Parse { line: lineno, msg };
        if f.len() != 16 {
            return Err(bad(format!("expected 16 fields, found {}", f.len())));
        }
        fn num<T: FromStr>(s: &str, name: &str, line: usize) -> Result<T> {
            s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad {name} {s:?}"),
            })
        }
        Ok(BenchResult {
            path: f[0].parse().map_err(|e: Error| bad(e.to_string()))?,
            axis: f[1].to_string(),
            value: num(f[2], "value", lineno)?,
            samples_per_s: num(f[3], "samples_per_s", lineno)?,
            ms_per_sample: num(f[4], "ms_per_sample", lineno)?,
            speedup: num(f[5], "speedup", lineno)?,
            peak_bytes: num(f[6], "peak_bytes", lineno)?,
            ctx_count: num(f[7], "ctx_count", lineno)?,
            head_evals: num(f[8], "head_evals", lineno)?,
            block_evals: num(f[9], "block_evals", lineno)?,
            xattn_reads: num(f[10], "xattn_reads", lineno)?,
            decode_samples_per_s: num(f[11], "decode_samples_per_s", lineno)?,
            batch: num(f[12], "batch", lineno)?,
            beam: num(f[13], "beam", lineno)?,
            users: num(f[14], "users", lineno)?,
            ndcg10: num(f[15], "ndcg10", lineno)?,
        })
    }

    /// Sets `speedup` relative to `baseline`.
    pub fn relative_to(&mut self, baseline: &BenchResult) {
        self.speedup = self.samples_per_s / baseline.samples_per_s;
    }
}

pub fn write_bench_csv<W: Write>(mut w: W, rows: &[BenchResult]) -> Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn read_bench_csv<R: BufRead>(r: R) -> Result<Vec<BenchResult>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != BENCH_CSV_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    msg: "unexpected header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        out.push(BenchResult::parse_row(&line, i + 1)?);
    }
    Ok(out)
}

/// Outcome of one pass over the examples.
struct Pass {
    total: Duration,
    decode: Duration,
    counters: Counters,
    report: EvalReport,
}

fn need<'a, T>(m: Option<&'a T>, path: BenchPath, what: &str) -> Result<&'a T> {
    m.ok_or_else(|| Error::invalid(format!("path {path} needs a {what}")))
}

/// Encodes, decodes and scores one batch. Returns the decode-region time.
fn run_batch(
    path: BenchPath,
    models: &BenchModels,
    catalog: &Catalog,
    hist: &[&[ItemId]],
    cfg: &DecodeConfig,
) -> Result<(Vec<Vec<Hypothesis>>, Counters, Duration)> {
    let oracle = models.oracle;
    let states: Vec<Tensor> = match path {
        BenchPath::Teacher => Vec::new(),
        BenchPath::Mlp | BenchPath::Reference => {
            hist.iter().map(|h| oracle.encode_history(h)).collect::<Result<_>>()?
        }
        BenchPath::MethodPP => {
            let enc = need(models.encoder, path, "student encoder")?;
            hist.iter()
                .map(|h| enc.encode(&oracle.serialize(h)?))
                .collect::<Result<_>>()?
        }
    };
    let refs: Vec<&Tensor> = states.iter().collect();
    let start = Instant::now();
    let (hyps, counters) = match path {
        BenchPath::Mlp | BenchPath::MethodPP => {
            let mut s = MlpScorer::new(need(models.decoder, path, "student decoder")?, &refs)?;
            let h = beam_search(&mut s, catalog, hist.len(), cfg)?;
            (h, s.counters())
        }
        BenchPath::Teacher => {
            let mut s = TeacherScorer::new(oracle, hist.to_vec());
            let h = beam_search(&mut s, catalog, hist.len(), cfg)?;
            (h, s.counters())
        }
        BenchPath::Reference => {
            let mut s = ReferenceScorer::new(need(models.reference, path, "reference decoder")?, refs)?;
            let h = beam_search(&mut s, catalog, hist.len(), cfg)?;
            (h, s.counters())
        }
    };
    Ok((hyps, counters, start.elapsed()))
}

fn one_pass(
    path: BenchPath,
    models: &BenchModels,
    catalog: &Catalog,
    records: &[UserRecord],
    examples: &[Example],
    opts: &BenchOptions,
) -> Result<Pass> {
    let cfg = DecodeConfig::new(opts.beam, opts.k);
    let chunks: Vec<&[Example]> = examples.chunks(opts.batch).collect();
    let workers = opts.workers.max(1).min(chunks.len());
    let start = Instant::now();
    let run_chunk = |chunk: &[Example]| -> Result<(Vec<Vec<ItemId>>, Counters, Duration)> {
        let hist: Vec<&[ItemId]> = chunk.iter().map(|e| e.history(records)).collect();
        let (hyps, c, d) = run_batch(path, models, catalog, &hist, &cfg)?;
        let items = hyps.iter().map(|h| h.iter().map(|x| x.item).collect()).collect();
        Ok((items, c, d))
    };
    let results: Vec<Result<(Vec<Vec<ItemId>>, Counters, Duration)>> = if workers <= 1 {
        chunks.iter().map(|c| run_chunk(c)).collect()
    } else {
        let per = chunks.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(|| group.iter().map(|c| run_chunk(c)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("bench worker panicked")).collect()
        })
    };
    let mut acc = MetricAccumulator::new();
    let mut counters = Counters::default();
    let mut decode = Duration::ZERO;
    for (chunk, res) in chunks.iter().zip(results) {
        let (items, c, d) = res?;
        for (ex, ranked) in chunk.iter().zip(&items) {
            acc.add(ranked, ex.target);
        }
        counters += c;
        decode += d;
    }
    Ok(Pass {
        total: start.elapsed(),
        decode,
        counters,
        report: acc.finish(),
    })
}

/// Times `repetitions` passes over `examples` after `warmup` untimed passes.
/// Counters and metrics are those of a single pass.
pub fn run_throughput(
    path: BenchPath,
    models: &BenchModels,
    catalog: &Catalog,
    records: &[UserRecord],
    examples: &[Example],
    opts: &BenchOptions,
) -> Result<BenchResult> {
    if examples.is_empty() {
        return Err(Error::invalid("benchmark needs a non-empty example set"));
    }
    if opts.batch == 0 || opts.repetitions == 0 {
        return Err(Error::invalid("batch size and repetitions must be positive"));
    }
    for _ in 0..opts.warmup {
        one_pass(path, models, catalog, records, examples, opts)?;
    }
    let base = alloc_stats::live_bytes();
    alloc_stats::reset_peak();
    let mut total = Duration::ZERO;
    let mut decode = Duration::ZERO;
    let mut last = None;
    for _ in 0..opts.repetitions {
        let p = one_pass(path, models, catalog, records, examples, opts)?;
        total += p.total;
        decode += p.decode;
        if let Some(prev) = &last {
            let prev: &Pass = prev;
            if prev.counters != p.counters {
                return Err(Error::invalid("work counters differ between identical passes"));
            }
        }
        last = Some(p);
    }
    let peak = alloc_stats::peak_bytes().saturating_sub(base);
    let last = last.expect("at least one repetition");
    let samples = (examples.len() * opts.repetitions) as f64;
    let sps = samples / total.as_secs_f64().max(1e-12);
    Ok(BenchResult {
        path,
        axis: "point".into(),
        value: 0,
        samples_per_s: sps,
        ms_per_sample: 1000.0 / sps,
        speedup: 1.0,
        peak_bytes: peak,
        ctx_count: last.counters.context_computations,
        head_evals: last.counters.head_evals,
        block_evals: last.counters.block_evals,
        xattn_reads: last.counters.xattn_reads,
        decode_samples_per_s: samples / decode.as_secs_f64().max(1e-12),
        batch: opts.batch,
        beam: opts.beam,
        users: examples.len(),
        ndcg10: last.report.ndcg10,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Batch,
    Beam,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Batch => "batch",
            SweepAxis::Beam => "beam",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(SweepAxis::Batch),
            "beam" => Ok(SweepAxis::Beam),
            _ => Err(Error::invalid(format!("unknown sweep axis {s:?} (expected batch or beam)"))),
        }
    }
}

/// One row per (path, value). Speedups are relative to the first path at
/// the same value.
pub fn sweep(
    axis: SweepAxis,
    values: &[usize],
    paths: &[BenchPath],
    models: &BenchModels,
    catalog: &Catalog,
    records: &[UserRecord],
    examples: &[Example],
    base: &BenchOptions,
) -> Result<Vec<BenchResult>> {
    if values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("sweep values must be sorted ascending"));
    }
    let mut out = Vec::new();
    for &v in values {
        let mut opts = *base;
        match axis {
            SweepAxis::Batch => opts.batch = v,
            SweepAxis::Beam => {
                opts.beam = v;
                opts.k = opts.k.min(v);
            }
        }
        let mut rows: Vec<BenchResult> = Vec::new();
        for &p in paths {
            let mut r = run_throughput(p, models, catalog, records, examples, &opts)?;
            r.axis = axis.as_str().into();
            r.value = v;
            if let Some(first) = rows.first() {
                r.relative_to(first);
            }
            rows.push(r);
        }
        out.extend(rows);
    }
    Ok(out)
}

/// Relative throughput drop of `path` between the smallest and largest
/// value of a sweep.
pub fn throughput_drop(rows: &[BenchResult], path: BenchPath) -> Option<f64> {
    let mine: Vec<&BenchResult> = rows.iter().filter(|r| r.path == path).collect();
    let (first, last) = (mine.first()?, mine.last()?);
    Some(1.0 - last.samples_per_s / first.samples_per_s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LawCheck {
    pub law: String,
    pub expected: u64,
    pub actual: u64,
}

impl LawCheck {
    pub fn holds(&self) -> bool {
        self.expected == self.actual
    }
}

impl fmt::Display for LawCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.holds() { "ok" } else { "VIOLATED" };
        write!(f, "{tag:>8}  {}: expected {}, actual {}", self.law, self.expected, self.actual)
    }
}

/// Cost-model closed form for full beams: every step after the first
/// expands exactly `B` beams per user.
pub fn expected_beam_rows(l: usize, beam: usize, users: usize) -> u64 {
    ((1 + (l - 1) * beam) * users) as u64
}

/// Beam rows scored per user by constrained search: step `t` holds
/// `min(B, valid prefixes of length t)` beams. Equals `1 + (L-1)B` once
/// every depth below `L` has at least `B` prefixes.
pub fn beam_rows_per_user(trie: &PrefixTrie, beam: usize) -> u64 {
    (0..trie.depth()).map(|t| beam.min(trie.nodes_at(t)) as u64).sum()
}

/// Checks the counter laws on a cached-reference result and an MLP result
/// produced at the same beam size and user count. `states_rows` is the
/// total encoder length over those users (the MLP path's only
/// cross-attention reads).
pub fn verify_counter_laws(
    reference: &BenchResult,
    mlp: &BenchResult,
    layers: usize,
    trie: &PrefixTrie,
    states_rows: u64,
) -> Result<Vec<LawCheck>> {
    if reference.beam != mlp.beam || reference.users != mlp.users {
        return Err(Error::invalid("counter laws need matching beam size and user count"));
    }
    let rows = beam_rows_per_user(trie, mlp.beam) * mlp.users as u64;
    Ok(vec![
        LawCheck {
            law: format!("reference block evals = N * beam rows, N={layers}"),
            expected: layers as u64 * rows,
            actual: reference.block_evals,
        },
        LawCheck {
            law: "mlp context computations = users".into(),
            expected: mlp.users as u64,
            actual: mlp.ctx_count,
        },
        LawCheck {
            law: "mlp head evals = beam rows".into(),
            expected: rows,
            actual: mlp.head_evals,
        },
        LawCheck {
            law: "mlp cross-attention reads = encoder rows".into(),
            expected: states_rows,
            actual: mlp.xattn_reads,
        },
        LawCheck {
            law: "mlp block evals = 0".into(),
            expected: 0,
            actual: mlp.block_evals,
        },
    ])
}
