//! End-to-end pipeline pieces shared by the CLI and the acceptance run.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::BenchOptions;
use crate::catalog::{Catalog, ItemId};
use crate::decode::{DecodeConfig, MaskConvention};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_student, StudentPipeline};
use crate::metrics::EvalReport;
use crate::student::config::{ContextMode, Embeddings, HeadMode, LogitSupport, PrefixMode, Readout, Switch};
use crate::student::{EncoderConfig, StudentConfig, StudentDecoder, StudentEncoder};
use crate::synth::{self, DatasetSplit, GeneratorProfile, UserRecord};
use crate::teacher::{OracleConfig, OracleTeacher, ReferenceConfig};
use crate::train::{
    self, DistillConfig, EncoderTrainConfig, Stage1Report, TeacherTargets, TrainReport,
};

/// Histories used to calibrate the oracle temperature.
const PILOT_HISTORIES: usize = 300;

/// A generated catalog, its oracle teacher, the sampled users and their split.
pub struct Dataset {
    pub profile: GeneratorProfile,
    pub catalog: Arc<Catalog>,
    pub oracle: OracleTeacher,
    pub records: Vec<UserRecord>,
    pub split: DatasetSplit,
}

pub fn oracle_config(profile: &GeneratorProfile) -> OracleConfig {
    let mut cfg = OracleConfig {
        gamma: profile.gamma,
        epsilon: profile.epsilon,
        ..OracleConfig::default()
    };
    let w = cfg.level_weights.clone();
    cfg.level_weights = (0..profile.l).map(|t| w.get(t).copied().unwrap_or(0.25)).collect();
    cfg
}

/// Builds the oracle and fixes its temperature: taken from the profile, or
/// calibrated on uniformly drawn pilot histories.
pub fn build_oracle(profile: &GeneratorProfile, catalog: Arc<Catalog>) -> Result<OracleTeacher> {
    let mut oracle = OracleTeacher::new(catalog.clone(), oracle_config(profile))?;
    match profile.kappa {
        Some(k) => oracle.set_kappa(k)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x5151);
            let pilots: Vec<Vec<ItemId>> = (0..PILOT_HISTORIES)
                .map(|_| {
                    let n = rng.gen_range(profile.history_min..=profile.history_max);
                    (0..n).map(|_| catalog.id_at(rng.gen_range(0..catalog.len()))).collect()
                })
                .collect();
            let refs: Vec<&[ItemId]> = pilots.iter().map(|p| p.as_slice()).collect();
            let k = oracle.calibrate_kappa(&refs, profile.top1_target)?;
            log::info!("calibrated kappa = {k:.4}");
        }
    }
    Ok(oracle)
}

impl Dataset {
    pub fn generate(profile: &GeneratorProfile) -> Result<Dataset> {
        profile.validate()?;
        let catalog = Arc::new(synth::generate_catalog(profile)?);
        let oracle = build_oracle(profile, catalog.clone())?;
        let records = synth::generate_histories(&catalog, &oracle, profile)?;
        let split = synth::split_leave_last_out(&records);
        Ok(Dataset {
            profile: profile.clone(),
            catalog,
            oracle,
            records,
            split,
        })
    }
}

const CATALOG_FILE: &str = "catalog.tsv";
const DATASET_FILE: &str = "dataset.tsv";
const PROFILE_FILE: &str = "data.cfg";

impl Dataset {
    /// Writes `catalog.tsv`, `dataset.tsv` and `data.cfg` (the profile with
    /// the resolved oracle temperature) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join(CATALOG_FILE))?);
        self.catalog.write(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(DATASET_FILE))?);
        synth::write_dataset(&mut w, self.catalog.depth(), &self.records)?;
        w.flush()?;
        let mut profile = self.profile.clone();
        profile.kappa = Some(self.oracle.config().kappa);
        fs::write(dir.join(PROFILE_FILE), section_text("data", &profile))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mut profile = GeneratorProfile::default();
        let text = fs::read_to_string(dir.join(PROFILE_FILE))?;
        for (n, line) in text.lines().enumerate() {
            if let Some((k, v)) = split_line(line, n + 1)? {
                let k = k.strip_prefix("data.").ok_or_else(|| Error::Config(format!("unexpected key {k:?} in {PROFILE_FILE}")))?;
                profile.set(k, v)?;
            }
        }
        let catalog = Arc::new(Catalog::read(BufReader::new(File::open(dir.join(CATALOG_FILE))?))?);
        let (l, records) = synth::read_dataset(BufReader::new(File::open(dir.join(DATASET_FILE))?))?;
        if l != catalog.depth() || profile.l != l || profile.c != catalog.codebook() {
            return Err(Error::invalid(format!(
                "dataset L={l}, catalog L={} C={}, profile L={} C={} disagree",
                catalog.depth(),
                catalog.codebook(),
                profile.l,
                profile.c
            )));
        }
        synth::check_records(&catalog, &records)?;
        let oracle = build_oracle(&profile, catalog.clone())?;
        let split = synth::split_leave_last_out(&records);
        Ok(Dataset {
            profile,
            catalog,
            oracle,
            records,
            split,
        })
    }

    /// Student config with the dataset-dependent sizes filled in.
    pub fn student_config(&self, template: &StudentConfig) -> StudentConfig {
        let mut c = template.clone();
        c.l = self.catalog.depth();
        c.c = self.catalog.codebook();
        c.d_h = self.oracle.d_h();
        c.d_e = self.oracle.d_e();
        c
    }

    pub fn encoder_config(&self, template: &EncoderConfig) -> EncoderConfig {
        let mut c = template.clone();
        c.d_h = self.oracle.d_h();
        c.d_e = self.oracle.d_e();
        c
    }

    /// The first `users` test cases (all when 0).
    pub fn test_cases(&self, users: usize) -> &[synth::Example] {
        let n = if users == 0 { self.split.test.len() } else { users.min(self.split.test.len()) };
        &self.split.test[..n]
    }
}

// ---------------------------------------------------------------------------
// Run configuration: namespaced `section.key = value` lines.

/// A value that can appear on the right of `key = value`.
pub trait KvValue: Sized {
    fn show(&self) -> String;
    fn parse_kv(s: &str) -> Option<Self>;
}

macro_rules! kv_from_str {
    ($($t:ty),*) => {$(
        impl KvValue for $t {
            fn show(&self) -> String {
                self.to_string()
            }
            fn parse_kv(s: &str) -> Option<Self> {
                s.parse().ok()
            }
        }
    )*};
}
kv_from_str!(usize, u64, f64, bool);

/// `auto` stands for "not fixed".
impl KvValue for Option<f64> {
    fn show(&self) -> String {
        self.map_or_else(|| "auto".into(), |v| v.to_string())
    }
    fn parse_kv(s: &str) -> Option<Self> {
        if s == "auto" {
            Some(None)
        } else {
            s.parse().ok().map(Some)
        }
    }
}

impl KvValue for Option<PathBuf> {
    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
    }
    fn parse_kv(s: &str) -> Option<Self> {
        Some(if s.is_empty() || s == "none" { None } else { Some(PathBuf::from(s)) })
    }
}

/// Space-separated list.
impl KvValue for Vec<f64> {
    fn show(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
    }
    fn parse_kv(s: &str) -> Option<Self> {
        s.split_whitespace().map(|t| t.parse().ok()).collect()
    }
}

impl KvValue for MaskConvention {
    fn show(&self) -> String {
        match self {
            MaskConvention::AfterSoftmax => "after_softmax",
            MaskConvention::Renormalized => "renormalized",
        }
        .into()
    }
    fn parse_kv(s: &str) -> Option<Self> {
        match s {
            "after_softmax" => Some(MaskConvention::AfterSoftmax),
            "renormalized" => Some(MaskConvention::Renormalized),
            _ => None,
        }
    }
}

/// A struct whose fields are addressable as config keys.
pub trait KvSection {
    fn pairs(&self) -> Vec<(&'static str, String)>;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
}

macro_rules! kv_section {
    ($ty:ty, [$($f:ident),* $(,)?]) => {
        impl KvSection for $ty {
            fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($f), KvValue::show(&self.$f))),*]
            }
            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($f) => {
                        self.$f = KvValue::parse_kv(value)
                            .ok_or_else(|| Error::Config(format!("bad value {value:?} for {key}")))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }
        }
    };
}

kv_section!(GeneratorProfile, [l, c, items, branching, history_min, history_max, users, gamma, kappa, top1_target, epsilon, seed]);
kv_section!(DistillConfig, [alpha, tau, lr, weight_decay, epochs, batch_size, seed, val_users, val_beam]);
kv_section!(EncoderConfig, [depth, width, d_h, d_e, max_len, shared_roles, seed]);
kv_section!(EncoderTrainConfig, [lr, weight_decay, epochs, batch_size, seed]);
kv_section!(DecodeConfig, [beam, k, mask]);
kv_section!(BenchOptions, [batch, beam, k, repetitions, warmup, workers]);
kv_section!(ReferenceConfig, [layers, hidden, heads, head_dim, ffn, kv_cache, seed]);
kv_section!(EvalSettings, [batch, users, m, bench_users]);
kv_section!(PathSettings, [dataset, decoder, encoder]);

impl KvSection for StudentConfig {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        StudentConfig::pairs(self)
    }
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        StudentConfig::set(self, key, value)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Users decoded per batch.
    pub batch: usize,
    /// Test cases evaluated (0 = all).
    pub users: usize,
    /// Teacher-generated prefix digits in hybrid decoding.
    pub m: usize,
    /// Test cases timed by the benchmark.
    pub bench_users: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            batch: 64,
            users: 0,
            m: 0,
            bench_users: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathSettings {
    /// Directory holding catalog.tsv, dataset.tsv and data.cfg.
    pub dataset: Option<PathBuf>,
    pub decoder: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
}

/// Every tunable of a run, addressable as `section.key`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: GeneratorProfile,
    pub student: StudentConfig,
    pub train: DistillConfig,
    pub encoder: EncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalSettings,
    pub bench: BenchOptions,
    pub reference: ReferenceConfig,
    pub paths: PathSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = OracleConfig::default();
        let data = GeneratorProfile::default();
        RunConfig {
            student: StudentConfig::new(data.l, data.c, o.d_h, o.d_e),
            encoder: EncoderConfig::new(o.d_h, o.d_e),
            data,
            train: DistillConfig::default(),
            encoder_train: EncoderTrainConfig::default(),
            decode: DecodeConfig::new(50, 10),
            eval: EvalSettings::default(),
            bench: BenchOptions::new(32, 50),
            reference: ReferenceConfig::default(),
            paths: PathSettings::default(),
        }
    }
}

fn split_line(line: &str, lineno: usize) -> Result<Option<(&str, &str)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
        line: lineno,
        msg: format!("expected section.key = value, got {line:?}"),
    })?;
    Ok(Some((k.trim(), v.trim())))
}

fn section_text(name: &str, s: &dyn KvSection) -> String {
    let mut out = String::new();
    for (k, v) in s.pairs() {
        let _ = writeln!(out, "{name}.{k} = {v}");
    }
    out
}

impl RunConfig {
    fn sections(&self) -> Vec<(&'static str, &dyn KvSection)> {
        vec![
            ("data", &self.data),
            ("student", &self.student),
            ("train", &self.train),
            ("encoder", &self.encoder),
            ("encoder_train", &self.encoder_train),
            ("decode", &self.decode),
            ("eval", &self.eval),
            ("bench", &self.bench),
            ("reference", &self.reference),
            ("paths", &self.paths),
        ]
    }

    fn section_mut(&mut self, name: &str) -> Option<&mut dyn KvSection> {
        Some(match name {
            "data" => &mut self.data,
            "student" => &mut self.student,
            "train" => &mut self.train,
            "encoder" => &mut self.encoder,
            "encoder_train" => &mut self.encoder_train,
            "decode" => &mut self.decode,
            "eval" => &mut self.eval,
            "bench" => &mut self.bench,
            "reference" => &mut self.reference,
            "paths" => &mut self.paths,
            _ => return None,
        })
    }

    /// Sets one `section.key`. Unknown sections and keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} lacks a section prefix")))?;
        let s = self
            .section_mut(section)
            .ok_or_else(|| Error::Config(format!("unknown section {section:?} in key {key:?}")))?;
        s.set(field, value)
            .map_err(|e| Error::Config(format!("{section}.{}", e.to_string().trim_start_matches("config error: "))))
    }

    /// Applies every line of a config file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            if let Some((k, v)) = split_line(line, n + 1)? {
                self.set(k, v).map_err(|e| Error::Parse {
                    line: n + 1,
                    msg: e.to_string(),
                })?;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        self.sections().into_iter().map(|(n, s)| section_text(n, s)).collect()
    }

    /// One seed for every model-side random stream; the data seed is separate.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.student.seed = seed;
        self.encoder.seed = seed;
        self.encoder_train.seed = seed;
    }
}

impl FromStr for RunConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RunConfig::parse(s)
    }
}

// ---------------------------------------------------------------------------
// Ablation variants.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Reference rows.
    Base,
    /// Head architecture.
    G1,
    /// Context module.
    G2,
    /// Distillation design.
    G3,
    /// Encoder distillation.
    F2,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::G1 => "G1",
            Group::G2 => "G2",
            Group::G3 => "G3",
            Group::F2 => "F2",
        }
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Group::Base),
            "G1" | "g1" => Ok(Group::G1),
            "G2" | "g2" => Ok(Group::G2),
            "G3" | "g3" => Ok(Group::G3),
            "F2" | "f2" => Ok(Group::F2),
            _ => Err(Error::invalid(format!("unknown group {s:?} (expected G1, G2, G3 or F2)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    /// Decoder on the oracle's encoder states.
    Decoder,
    /// Stage 1 encoder regression, then Stage 2 decoder training.
    TwoStage,
    /// Encoder and decoder trained jointly without Stage 1.
    EndToEnd,
}

#[derive(Clone, Copy, Debug)]
pub struct Variant {
    pub name: &'static str,
    pub group: Group,
    pub label: &'static str,
    /// The row deltas are measured against.
    pub reference: &'static str,
    pub pipeline: Pipeline,
    apply: fn(&mut RunConfig),
}

impl Variant {
    pub fn configure(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        (self.apply)(&mut c);
        c
    }
}

const fn v(
    name: &'static str,
    group: Group,
    label: &'static str,
    reference: &'static str,
    pipeline: Pipeline,
    apply: fn(&mut RunConfig),
) -> Variant {
    Variant {
        name,
        group,
        label,
        reference,
        pipeline,
        apply,
    }
}

pub const VARIANTS: &[Variant] = &[
    v("full", Group::Base, "full method", "full", Pipeline::Decoder, |_| {}),
    v("no_prefix", Group::G1, "w/o prefix conditioning", "full", Pipeline::Decoder, |c| {
        c.student.prefix_mode = PrefixMode::None
    }),
    v("sum_prefix", Group::G1, "summed prefix embeddings", "full", Pipeline::Decoder, |c| {
        c.student.prefix_mode = PrefixMode::Sum
    }),
    v("shared_head", Group::G1, "shared MLP head", "full", Pipeline::Decoder, |c| {
        c.student.prefix_mode = PrefixMode::Sum;
        c.student.head_mode = HeadMode::Shared;
    }),
    v("cascade", Group::G1, "cascaded hidden state", "full", Pipeline::Decoder, |c| {
        c.student.cascade = crate::student::config::Cascade::HiddenState
    }),
    v("no_mha", Group::G2, "w/o multi-head attention", "full", Pipeline::Decoder, |c| {
        c.student.context_mode = ContextMode::LinearMeanpool
    }),
    v("per_digit_readout", Group::G2, "per-digit context readout", "full", Pipeline::Decoder, |c| {
        c.student.context_readout = Readout::PerDigit
    }),
    v("no_context_ffn", Group::G2, "w/o context FFN", "full", Pipeline::Decoder, |c| {
        c.student.context_ffn = Switch::Off
    }),
    v("no_kl", Group::G3, "w/o KL", "full", Pipeline::Decoder, |c| c.train.alpha = 0.0),
    v("full_vocab", Group::G3, "full-vocab logits", "full", Pipeline::Decoder, |c| {
        c.student.logit_support = LogitSupport::FullVocab
    }),
    v("no_teacher_emb", Group::G3, "w/o teacher embeddings", "full", Pipeline::Decoder, |c| {
        c.student.embeddings = Embeddings::Trainable
    }),
    v("methodpp", Group::Base, "two-stage encoder distillation", "methodpp", Pipeline::TwoStage, |_| {}),
    v("methodpp_shared_mlp", Group::F2, "shared role MLP", "methodpp", Pipeline::TwoStage, |c| {
        c.encoder.shared_roles = true
    }),
    v("methodpp_end2end", Group::F2, "End2End (no Stage 1)", "methodpp", Pipeline::EndToEnd, |_| {}),
];

pub fn variant(name: &str) -> Result<&'static Variant> {
    VARIANTS.iter().find(|v| v.name == name).ok_or_else(|| {
        let names: Vec<&str> = VARIANTS.iter().map(|v| v.name).collect();
        Error::invalid(format!("unknown variant {name:?}; valid: {}", names.join(", ")))
    })
}

pub fn group_variants(group: Group) -> Vec<&'static Variant> {
    VARIANTS.iter().filter(|v| v.group == group).collect()
}

/// A trained student and its training records.
pub struct Trained {
    pub decoder: StudentDecoder,
    pub encoder: Option<StudentEncoder>,
    pub train: TrainReport,
    pub stage1: Option<Stage1Report>,
}

impl Trained {
    pub fn pipeline<'a>(&'a self, ds: &'a Dataset) -> StudentPipeline<'a> {
        let p = StudentPipeline::new(&ds.oracle, &self.decoder);
        match &self.encoder {
            Some(e) => p.with_encoder(e),
            None => p,
        }
    }

    /// Test-set metrics with the run's decode and eval settings.
    pub fn evaluate(&self, ds: &Dataset, cfg: &RunConfig) -> Result<EvalReport> {
        evaluate_student(
            &self.pipeline(ds),
            &ds.catalog,
            &ds.records,
            ds.test_cases(cfg.eval.users),
            &cfg.decode,
            cfg.eval.batch,
        )
    }
}

/// Trains a student with the given pipeline on `cfg`.
pub fn train_pipeline(ds: &Dataset, targets: &TeacherTargets, cfg: &RunConfig, pipeline: Pipeline) -> Result<Trained> {
    let mut decoder = StudentDecoder::from_oracle(ds.student_config(&cfg.student), &ds.oracle)?;
    match pipeline {
        Pipeline::Decoder => {
            let train = train::train_student(&mut decoder, &ds.oracle, &ds.records, &ds.split, targets, &cfg.train)?;
            Ok(Trained {
                decoder,
                encoder: None,
                train,
                stage1: None,
            })
        }
        Pipeline::TwoStage => {
            let mut enc = StudentEncoder::from_oracle(ds.encoder_config(&cfg.encoder), &ds.oracle)?;
            let seqs = train::stage1_sequences(&ds.records, &ds.split);
            let stage1 = train::train_encoder_stage1(&mut enc, &ds.oracle, &seqs, &cfg.encoder_train)?;
            let train = train::train_encoder_stage2(&mut decoder, &mut enc, &ds.oracle, &ds.records, &ds.split, targets, &cfg.train)?;
            Ok(Trained {
                decoder,
                encoder: Some(enc),
                train,
                stage1: Some(stage1),
            })
        }
        Pipeline::EndToEnd => {
            let mut enc = StudentEncoder::from_oracle(ds.encoder_config(&cfg.encoder), &ds.oracle)?;
            let train = train::train_end_to_end(&mut decoder, &mut enc, &ds.oracle, &ds.records, &ds.split, targets, &cfg.train)?;
            Ok(Trained {
                decoder,
                encoder: Some(enc),
                train,
                stage1: None,
            })
        }
    }
}

pub fn train_variant(ds: &Dataset, targets: &TeacherTargets, base: &RunConfig, variant: &Variant) -> Result<Trained> {
    train_pipeline(ds, targets, &variant.configure(base), variant.pipeline)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub recall10: f64,
    pub ndcg10: f64,
    /// Relative NDCG@10 change against the variant's reference row.
    pub delta: f64,
}

pub const ABLATION_CSV_HEADER: &str = "group,variant,recall@10,ndcg@10,delta_ndcg@10";

/// Trains and evaluates the reference rows and the named variants. Rows
/// come back in request order, each reference row first.
pub fn ablate(ds: &Dataset, targets: &TeacherTargets, base: &RunConfig, names: &[&str]) -> Result<Vec<AblationRow>> {
    let wanted: Vec<&Variant> = names.iter().map(|n| variant(n)).collect::<Result<_>>()?;
    let mut order: Vec<&Variant> = Vec::new();
    for v in &wanted {
        let r = variant(v.reference)?;
        if !order.iter().any(|o| o.name == r.name) {
            order.push(r);
        }
    }
    for v in wanted {
        if !order.iter().any(|o| o.name == v.name) {
            order.push(v);
        }
    }
    let mut reports: Vec<(&Variant, EvalReport)> = Vec::new();
    for v in order {
        log::info!("ablation: training {}", v.name);
        let trained = train_variant(ds, targets, base, v)?;
        let report = trained.evaluate(ds, &v.configure(base))?;
        log::info!("ablation: {} NDCG@10 {:.4}", v.name, report.ndcg10);
        reports.push((v, report));
    }
    let lookup = |name: &str| reports.iter().find(|(v, _)| v.name == name).map(|(_, r)| r.ndcg10);
    reports
        .iter()
        .map(|(v, r)| {
            let refv = lookup(v.reference).expect("reference trained first");
            if !(refv > 0.0) {
                return Err(Error::invalid(format!("reference {} scored zero NDCG@10", v.reference)));
            }
            Ok(AblationRow {
                group: v.group.as_str().into(),
                variant: v.name.into(),
                recall10: r.recall10,
                ndcg10: r.ndcg10,
                delta: r.ndcg10 / refv - 1.0,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "{ABLATION_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:?},{:?},{:?}", r.group, r.variant, r.recall10, r.ndcg10, r.delta)?;
    }
    Ok(())
}

pub fn read_ablation_csv<R: std::io::BufRead>(r: R) -> Result<Vec<AblationRow>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        out.push(AblationRow {
            group: f[0].into(),
            variant: f[1].into(),
            recall10: num(f[2])?,
            ndcg10: num(f[3])?,
            delta: num(f[4])?,
        });
    }
    Ok(out)
}

/// Human-readable Δ table.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<6} {:<22} {:>9} {:>9} {:>8}\n", "group", "variant", "R@10", "N@10", "delta");
    for r in rows {
        let d = if r.delta == 0.0 && (r.group == "base") {
            "---".to_string()
        } else {
            format!("{:+.1}%", 100.0 * r.delta)
        };
        let _ = writeln!(s, "{:<6} {:<22} {:>9.4} {:>9.4} {:>8}", r.group, r.variant, r.recall10, r.ndcg10, d);
    }
    s
}
