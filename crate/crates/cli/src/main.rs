use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgGroup, Args, Parser, Subcommand};

use sidmlp::bench::{self, BenchModels, BenchPath, SweepAxis};
use sidmlp::catalog::{Catalog, ItemId};
use sidmlp::decode::{beam_search, m_mode_decode, write_decode_csv, DecodeConfig, Hypothesis, StepScorer, TeacherScorer};
use sidmlp::evaluate::{evaluate_student, evaluate_teacher, StudentPipeline};
use sidmlp::experiment::{self, Dataset, Group, RunConfig, Trained};
use sidmlp::metrics::{self, EvalReport, TTestInput};
use sidmlp::student::{teacher_digit_embeddings, MlpScorer, StudentDecoder, StudentEncoder, Vocab};
use sidmlp::synth::GeneratorProfile;
use sidmlp::teacher::ReferenceDecoder;
use sidmlp::train::{self, TeacherTargets};
use sidmlp::Tensor;

/// Prefix-conditioned MLP decoding for semantic-ID recommenders.
#[derive(Parser)]
#[command(name = "sidmlp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every model-side random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Generator profile: default, small or tiny.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Dataset directory written by gen-data (overrides paths.dataset).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a catalog and user histories.
    GenData,
    /// Print the branching profile of a catalog file or dataset directory.
    Stats { path: PathBuf },
    /// Train a student (the full method unless --variant is given).
    Train {
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Stage 1: regress the oracle's encoder states with the student encoder.
    TrainEncoder,
    /// Test-set metrics for one decode path.
    Eval(DecodeArgs),
    /// Write ranked items for every test user.
    Decode(DecodeArgs),
    /// Throughput, peak memory and counter laws.
    Bench(BenchArgs),
    /// Train and evaluate ablation variants against their reference.
    #[command(group(ArgGroup::new("which").required(true).multiple(true).args(["group", "variant"])))]
    Ablate {
        #[arg(long)]
        group: Option<String>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// One-sided non-inferiority t-test over per-seed values.
    Ttest {
        /// Comma-separated per-seed values.
        #[arg(long, required = true, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, required = true)]
        baseline: f64,
        /// Margin as a fraction of the baseline.
        #[arg(long, default_value_t = 0.01)]
        margin: f64,
    },
}

#[derive(Args)]
struct DecodeArgs {
    /// mlp, teacher or methodpp.
    #[arg(long, default_value = "mlp")]
    path: String,
    /// Teacher-generated prefix digits (hybrid decoding).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated paths; speedups are relative to the first.
    #[arg(long, default_value = "reference,mlp", value_delimiter = ',')]
    path: Vec<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Sweep axis: batch or beam.
    #[arg(long, requires = "values")]
    sweep: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
}

/// Problems with how the tool was invoked, reported with exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn resolve_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.profile {
        cfg.data = GeneratorProfile::by_name(p).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(d) = &c.data {
        cfg.paths.dataset = Some(d.clone());
    }
    for o in &c.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    if let Some(n) = std::env::var("SIDMLP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        cfg.bench.workers = cfg.bench.workers.min(n.max(1));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(&cli.common)?;
    let out = cli.common.out.clone();
    if let Command::Stats { path } = &cli.command {
        return stats(path);
    }
    if let Command::Ttest { values, baseline, margin } = &cli.command {
        return ttest(values, *baseline, *margin);
    }
    match &cli.command {
        Command::Eval(a) | Command::Decode(a) => {
            if let Some(b) = a.beam {
                cfg.decode.beam = b;
                cfg.decode.k = cfg.decode.k.min(b);
            }
            if let Some(b) = a.batch {
                cfg.eval.batch = b;
            }
            if let Some(m) = a.m {
                cfg.eval.m = m;
            }
        }
        Command::Bench(a) => {
            if let Some(b) = a.beam {
                cfg.bench.beam = b;
                cfg.bench.k = cfg.bench.k.min(b);
            }
            if let Some(b) = a.batch {
                cfg.bench.batch = b;
            }
        }
        _ => {}
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.cfg"), cfg.to_text())?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Train { variant } => train_cmd(&cfg, &out, &variant),
        Command::TrainEncoder => train_encoder(&cfg, &out),
        Command::Eval(a) => eval(&cfg, &out, &a.path),
        Command::Decode(a) => decode(&cfg, &out, &a.path),
        Command::Bench(a) => bench_cmd(&cfg, &out, &a),
        Command::Ablate { group, variant } => ablate(&cfg, &out, group.as_deref(), variant.as_deref()),
        Command::Stats { .. } | Command::Ttest { .. } => unreachable!(),
    }
}

fn load_dataset(cfg: &RunConfig, out: &Path) -> anyhow::Result<Dataset> {
    match &cfg.paths.dataset {
        Some(dir) => Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display())),
        None => {
            eprintln!("no dataset given; generating one from the data.* settings");
            let ds = Dataset::generate(&cfg.data)?;
            ds.save(&out.join("data"))?;
            Ok(ds)
        }
    }
}

fn print_branching(catalog: &Catalog, targets: Option<&[f64]>) {
    let s = catalog.branching_profile();
    println!("items   {}", s.item_count);
    println!("L, C    {}, {}", catalog.depth(), catalog.codebook());
    for (t, b) in s.branching.iter().enumerate() {
        match targets.and_then(|tg| tg.get(t)) {
            Some(tg) => println!("digit {}  branching {:>8.3}  target {:>7.2}  ratio {:.3}", t + 1, b, tg, b / tg),
            None => println!("digit {}  branching {:>8.3}", t + 1, b),
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let ds = Dataset::generate(&cfg.data)?;
    ds.save(out)?;
    print_branching(&ds.catalog, Some(&cfg.data.branching));
    println!(
        "users {} (train {}, val {}, test {}), kappa {:.4}",
        ds.records.len(),
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.test.len(),
        ds.oracle.config().kappa
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn stats(path: &Path) -> anyhow::Result<()> {
    let (file, dir) = if path.is_dir() {
        (path.join("catalog.tsv"), Some(path.to_path_buf()))
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf))
    };
    let catalog = Catalog::read(BufReader::new(
        File::open(&file).with_context(|| format!("opening {}", file.display()))?,
    ))?;
    let targets = dir
        .map(|d| d.join("data.cfg"))
        .filter(|p| p.exists())
        .map(|p| -> anyhow::Result<Vec<f64>> {
            let text = fs::read_to_string(p)?;
            let mut c = RunConfig::default();
            c.apply_text(&text)?;
            Ok(c.data.branching)
        })
        .transpose()?;
    print_branching(&catalog, targets.as_deref());
    Ok(())
}

fn ttest(values: &[f64], baseline: f64, margin: f64) -> anyhow::Result<()> {
    let input = TTestInput {
        values: values.to_vec(),
        baseline,
        margin,
    };
    let r = metrics::noninferiority_test(&input).map_err(|e| usage(e.to_string()))?;
    println!("mean {:.6}  sd {:.6}  t {:.4}  df {}  p {:.6}  {}", r.mean, r.sd, r.t, r.df, r.p, if r.pass { "PASS" } else { "FAIL" });
    Ok(())
}

fn save_trained(t: &Trained, out: &Path) -> anyhow::Result<()> {
    t.decoder.save(&out.join("decoder.ckpt"))?;
    if let Some(e) = &t.encoder {
        e.save(&out.join("encoder.ckpt"))?;
    }
    train::write_log(BufWriter::new(File::create(out.join("train_log.csv"))?), &t.train.log)?;
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Path, name: &str) -> anyhow::Result<()> {
    let variant = experiment::variant(name).map_err(|e| usage(e.to_string()))?;
    let ds = load_dataset(cfg, out)?;
    let targets = TeacherTargets::build(&ds.oracle, &ds.records, &ds.split.train)?;
    let vcfg = variant.configure(cfg);
    fs::write(out.join("config.cfg"), vcfg.to_text())?;
    let trained = experiment::train_pipeline(&ds, &targets, &vcfg, variant.pipeline)?;
    save_trained(&trained, out)?;
    println!(
        "{}: {} parameters, best epoch {} (val NDCG@10 {:.4})",
        variant.name,
        trained.decoder.num_params(),
        trained.train.best_epoch,
        trained.train.best_val.ndcg10
    );
    Ok(())
}

fn train_encoder(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let ds = load_dataset(cfg, out)?;
    let mut enc = StudentEncoder::from_oracle(ds.encoder_config(&cfg.encoder), &ds.oracle)?;
    let seqs = train::stage1_sequences(&ds.records, &ds.split);
    let report = train::train_encoder_stage1(&mut enc, &ds.oracle, &seqs, &cfg.encoder_train)?;
    enc.save(&out.join("encoder.ckpt"))?;
    let mut w = BufWriter::new(File::create(out.join("stage1_log.csv"))?);
    writeln!(w, "epoch,mse")?;
    writeln!(w, "0,{}", report.initial_mse)?;
    for (i, m) in report.epoch_mse.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, m)?;
    }
    println!("stage 1: initial MSE {:.5}, final {:.5}", report.initial_mse, report.epoch_mse.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

struct Models {
    decoder: Option<StudentDecoder>,
    encoder: Option<StudentEncoder>,
}

fn checkpoint_path(given: &Option<PathBuf>, out: &Path, file: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| out.join(file))
}

fn load_models(cfg: &RunConfig, out: &Path, ds: &Dataset, decoder: bool, encoder: bool) -> anyhow::Result<Models> {
    let mut m = Models {
        decoder: None,
        encoder: None,
    };
    if decoder {
        let p = checkpoint_path(&cfg.paths.decoder, out, "decoder.ckpt");
        m.decoder = Some(
            StudentDecoder::load(&p, Some(teacher_digit_embeddings(&ds.oracle)))
                .with_context(|| format!("loading decoder {} (train first, or set paths.decoder)", p.display()))?,
        );
    }
    if encoder {
        let p = checkpoint_path(&cfg.paths.encoder, out, "encoder.ckpt");
        let vocab = Vocab {
            l: ds.catalog.depth(),
            c: ds.catalog.codebook(),
        };
        m.encoder = Some(
            StudentEncoder::load(&p, vocab, ds.oracle.token_embeddings().clone())
                .with_context(|| format!("loading encoder {} (or set paths.encoder)", p.display()))?,
        );
    }
    Ok(m)
}

fn decode_path(s: &str) -> anyhow::Result<BenchPath> {
    match s.parse::<BenchPath>() {
        Ok(BenchPath::Reference) => Err(usage("the reference decoder has random weights; it is only for bench")),
        Ok(p) => Ok(p),
        Err(e) => Err(usage(e.to_string())),
    }
}

/// Teacher-forced per-digit accuracy on the test targets.
fn digit_accuracy(ds: &Dataset, scorer: &mut dyn StepScorer, users: usize) -> anyhow::Result<Vec<f64>> {
    let cases = ds.test_cases(users);
    let sids: Vec<&[u16]> = cases
        .iter()
        .map(|e| ds.catalog.sid_of_item(e.target).map(|s| s.digits()))
        .collect::<sidmlp::Result<_>>()?;
    Ok(metrics::per_digit_accuracy(scorer, &sids, ds.catalog.depth(), ds.catalog.codebook(), Some(ds.catalog.trie()))?)
}

fn eval(cfg: &RunConfig, out: &Path, path: &str) -> anyhow::Result<()> {
    let path = decode_path(path)?;
    let ds = load_dataset(cfg, out)?;
    let cases = ds.test_cases(cfg.eval.users);
    let hist: Vec<&[ItemId]> = cases.iter().map(|e| e.history(&ds.records)).collect();
    let mut teacher = evaluate_teacher(&ds.oracle, &ds.records, cases, &cfg.decode, cfg.eval.batch)?;
    teacher.per_digit_accuracy = digit_accuracy(&ds, &mut TeacherScorer::new(&ds.oracle, hist.clone()), cfg.eval.users)?;
    let mut rows: Vec<(&str, EvalReport)> = Vec::new();
    if path != BenchPath::Teacher {
        let m = load_models(cfg, out, &ds, true, path == BenchPath::MethodPP)?;
        let decoder = m.decoder.as_ref().unwrap();
        let mut pipe = StudentPipeline::new(&ds.oracle, decoder);
        if let Some(e) = &m.encoder {
            pipe = pipe.with_encoder(e);
        }
        let mut report = evaluate_student(&pipe, &ds.catalog, &ds.records, cases, &cfg.decode, cfg.eval.batch)?;
        report.recovery = Some(metrics::recovery_ratio(&report, &teacher)?);
        let states: Vec<Tensor> = hist.iter().map(|h| pipe.states(h)).collect::<sidmlp::Result<_>>()?;
        let refs: Vec<&Tensor> = states.iter().collect();
        report.per_digit_accuracy = digit_accuracy(&ds, &mut MlpScorer::new(decoder, &refs)?, cfg.eval.users)?;
        rows.push((path.as_str(), report));
    }
    teacher.recovery = Some(1.0);
    rows.push(("teacher", teacher));
    let mut w = BufWriter::new(File::create(out.join("eval.csv"))?);
    writeln!(w, "path,{}", EvalReport::CSV_HEADER)?;
    for (name, r) in &rows {
        writeln!(w, "{name},{}", r.csv_row())?;
        println!("[{name}]\n{r}\n");
    }
    Ok(())
}

fn decode(cfg: &RunConfig, out: &Path, path: &str) -> anyhow::Result<()> {
    let path = decode_path(path)?;
    let ds = load_dataset(cfg, out)?;
    let cases = ds.test_cases(cfg.eval.users);
    let m = load_models(cfg, out, &ds, path != BenchPath::Teacher, path == BenchPath::MethodPP)?;
    let l = ds.catalog.depth();
    if cfg.eval.m > l {
        return Err(usage(format!("--m must lie in 0..={l}")));
    }
    let mut ranked: Vec<Vec<Hypothesis>> = Vec::with_capacity(cases.len());
    let dcfg: DecodeConfig = cfg.decode;
    for chunk in cases.chunks(cfg.eval.batch.max(1)) {
        let hist: Vec<&[ItemId]> = chunk.iter().map(|e| e.history(&ds.records)).collect();
        let mut teacher = TeacherScorer::new(&ds.oracle, hist.clone());
        let out = match &m.decoder {
            None => beam_search(&mut teacher, &ds.catalog, hist.len(), &dcfg)?,
            Some(dec) => {
                let mut pipe = StudentPipeline::new(&ds.oracle, dec);
                if let Some(e) = &m.encoder {
                    pipe = pipe.with_encoder(e);
                }
                let states: Vec<Tensor> = hist.iter().map(|h| pipe.states(h)).collect::<sidmlp::Result<_>>()?;
                let refs: Vec<&Tensor> = states.iter().collect();
                let mut student = MlpScorer::new(dec, &refs)?;
                m_mode_decode(&mut teacher, &mut student, &ds.catalog, hist.len(), cfg.eval.m, &dcfg)?
            }
        };
        ranked.extend(out);
    }
    let users: Vec<u32> = cases.iter().map(|e| ds.records[e.record].user_id).collect();
    let file = out.join("decode.csv");
    write_decode_csv(BufWriter::new(File::create(&file)?), &users, &ranked)?;
    println!("wrote {} rankings to {}", ranked.len(), file.display());
    Ok(())
}

fn bench_cmd(cfg: &RunConfig, out: &Path, a: &BenchArgs) -> anyhow::Result<()> {
    let paths: Vec<BenchPath> = a
        .path
        .iter()
        .map(|p| p.parse().map_err(|e: sidmlp::Error| usage(e.to_string())))
        .collect::<anyhow::Result<_>>()?;
    if paths.is_empty() {
        return Err(usage("--path needs at least one decode path"));
    }
    let ds = load_dataset(cfg, out)?;
    let needs_dec = paths.iter().any(|p| matches!(p, BenchPath::Mlp | BenchPath::MethodPP));
    let needs_enc = paths.contains(&BenchPath::MethodPP);
    let m = load_models(cfg, out, &ds, needs_dec, needs_enc)?;
    let reference = ReferenceDecoder::new(cfg.reference.clone(), &ds.catalog, ds.oracle.d_h())?;
    let models = BenchModels {
        oracle: &ds.oracle,
        decoder: m.decoder.as_ref(),
        encoder: m.encoder.as_ref(),
        reference: Some(&reference),
    };
    let cases = ds.test_cases(cfg.eval.bench_users);
    let rows = match &a.sweep {
        Some(axis) => {
            let axis: SweepAxis = axis.parse().map_err(|e: sidmlp::Error| usage(e.to_string()))?;
            bench::sweep(axis, &a.values, &paths, &models, &ds.catalog, &ds.records, cases, &cfg.bench)?
        }
        None => {
            let mut rows: Vec<bench::BenchResult> = Vec::new();
            for &p in &paths {
                let mut r = bench::run_throughput(p, &models, &ds.catalog, &ds.records, cases, &cfg.bench)?;
                if let Some(first) = rows.first() {
                    r.relative_to(first);
                }
                rows.push(r);
            }
            rows
        }
    };
    println!("{:<10} {:>6} {:>6} {:>11} {:>11} {:>8} {:>12} {:>10} {:>8}", "path", "axis", "value", "samples/s", "decode s/s", "speedup", "peak bytes", "blocks", "ctx");
    for r in &rows {
        println!(
            "{:<10} {:>6} {:>6} {:>11.1} {:>11.1} {:>7.2}x {:>12} {:>10} {:>8}",
            r.path.as_str(),
            r.axis,
            r.value,
            r.samples_per_s,
            r.decode_samples_per_s,
            r.speedup,
            r.peak_bytes,
            r.block_evals,
            r.ctx_count
        );
    }
    if a.sweep.is_none() {
        let find = |p| rows.iter().find(|r| r.path == p);
        if let (Some(reference), Some(mlp)) = (find(BenchPath::Reference), find(BenchPath::Mlp)) {
            let states: u64 = cases
                .iter()
                .map(|e| ds.oracle.serialize(e.history(&ds.records)).map(|s| s.len() as u64))
                .sum::<sidmlp::Result<u64>>()?;
            let laws = bench::verify_counter_laws(reference, mlp, cfg.reference.layers, ds.catalog.trie(), states)?;
            for law in &laws {
                println!("{law}");
            }
            if laws.iter().any(|l| !l.holds()) {
                bail!("counter laws violated");
            }
        }
    }
    bench::write_bench_csv(BufWriter::new(File::create(out.join("bench.csv"))?), &rows)?;
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, group: Option<&str>, name: Option<&str>) -> anyhow::Result<()> {
    let names: Vec<&str> = match (group, name) {
        (_, Some(v)) => {
            let var = experiment::variant(v).map_err(|e| usage(e.to_string()))?;
            if let Some(g) = group {
                let g: Group = g.parse().map_err(|e: sidmlp::Error| usage(e.to_string()))?;
                if var.group != g && var.group != Group::Base {
                    return Err(usage(format!("variant {v} belongs to group {}", var.group.as_str())));
                }
            }
            vec![var.name]
        }
        (Some(g), None) => {
            let g: Group = g.parse().map_err(|e: sidmlp::Error| usage(e.to_string()))?;
            experiment::group_variants(g).into_iter().map(|v| v.name).collect()
        }
        (None, None) => return Err(usage("give --group or --variant")),
    };
    let ds = load_dataset(cfg, out)?;
    let targets = TeacherTargets::build(&ds.oracle, &ds.records, &ds.split.train)?;
    let rows = experiment::ablate(&ds, &targets, cfg, &names)?;
    experiment::write_ablation_csv(BufWriter::new(File::create(out.join("ablation.csv"))?), &rows)?;
    print!("{}", experiment::format_ablation(&rows));
    Ok(())
}
