use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use hldlab::checkpoint;
use hldlab::data::{read_texts, split_corpus, MarkovSpec, Tokenizer, TokenDataset};
use hldlab::eval::{load_mc_jsonl, log_perplexity, mc_error_rate, ChoiceNorm};
use hldlab::flops::{FlopsConfig, FlopsPlan};
use hldlab::harness::{
    self, load_records, metric_names, pointwise_improvement, run_grid, EvalSuite, GridSpec,
};
use hldlab::objectives::Method;
use hldlab::teacher_cache::{cache_teacher, open_cache, storage_estimate, CacheDtype, CacheOptions, StorageParams};
use hldlab::trainer::{run, write_metrics_csv, RunInputs, TeacherSource, TrainConfig};
use hldlab::{median_layer_index, TransformerModel};

#[derive(Parser)]
#[command(name = "hldlab", version, about = "Compute-matched logit and hidden-layer distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a text corpus (or sample a Markov corpus) into train/val splits.
    Ingest(IngestArgs),
    /// Run a teacher over the training split and store top-k logits and activations.
    CacheTeacher(CacheArgs),
    /// Print per-token costs and the compute-matched step plan.
    PlanFlops(PlanArgs),
    /// Train one student under a FLOPs plan.
    Train(TrainArgs),
    /// Score a checkpoint on log-perplexity and multiple-choice sets.
    Eval(EvalArgs),
    /// Run a hyperparameter grid.
    Grid(GridArgs),
    /// Build comparison tables from grid records.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct IngestArgs {
    /// Text file (documents separated by blank lines) or directory of files.
    #[arg(long, conflicts_with = "markov", required_unless_present = "markov")]
    input: Option<PathBuf>,
    /// Synthetic Markov corpus description (TOML).
    #[arg(long)]
    markov: Option<PathBuf>,
    /// Whitespace vocabulary file, one word per line; bytes otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    context_length: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F16,
}

impl From<Dtype> for CacheDtype {
    fn from(d: Dtype) -> Self {
        match d {
            Dtype::F32 => CacheDtype::F32,
            Dtype::F16 => CacheDtype::F16,
        }
    }
}

#[derive(clap::Args)]
struct CacheArgs {
    #[arg(long)]
    teacher: PathBuf,
    /// Tokenized training split the students will see.
    #[arg(long)]
    data: PathBuf,
    /// Residual-stream index to store; defaults to the median layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 128)]
    top_k: usize,
    #[arg(long, value_enum, default_value = "f32")]
    logit_dtype: Dtype,
    #[arg(long, value_enum, default_value = "f32")]
    activation_dtype: Dtype,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PlanArgs {
    /// FLOPs config or training config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// nll, kd, hldc, hldf or all.
    #[arg(long, default_value = "all")]
    method: String,
    /// Budget in overtraining units; overrides the config.
    #[arg(long)]
    ot: Option<f64>,
    /// HLDF phase-1 fraction; overrides the config.
    #[arg(long)]
    p1: Option<f64>,
    /// Write the plan as JSON (single method only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    method: Method,
    #[arg(long)]
    config: PathBuf,
    /// Precomputed plan; derived from the config when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tokenized set scored by log-perplexity, as `name=path` or `path`.
    #[arg(long)]
    data: Vec<String>,
    /// Multiple-choice JSONL set, as `name=path` or `path`.
    #[arg(long)]
    mc: Vec<String>,
    #[arg(long, default_value = "pertoken")]
    norm: ChoiceNorm,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GridArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Base training config; overrides `base` in the spec.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ReportKind {
    Hist,
    Scatter,
    Best,
    Full,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, value_enum)]
    kind: ReportKind,
    /// Metric column for hist/scatter; for best, restricts the columns.
    #[arg(long)]
    metric: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest(a) => ingest(a),
        Command::CacheTeacher(a) => cache(a),
        Command::PlanFlops(a) => plan_flops(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a),
    }
}

fn print_json(v: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    let (docs, vocab_size, pad, extra) = if let Some(spec_path) = &a.markov {
        let spec = MarkovSpec::load(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
        let src = spec.source()?;
        // the pad symbol sits just past the chain's alphabet
        let extra = serde_json::json!({ "entropy_rate": src.entropy_rate() });
        (spec.documents()?, spec.vocab_size + 1, spec.vocab_size as u32, extra)
    } else {
        let input = a.input.as_ref().expect("clap requires input or markov");
        let tok = match &a.vocab {
            Some(v) => Tokenizer::from_vocab_file(v)?,
            None => Tokenizer::Byte,
        };
        let texts = read_texts(input)?;
        let docs = texts.iter().map(|t| tok.encode(t)).collect::<hldlab::Result<Vec<_>>>()?;
        (docs, tok.vocab_size(), tok.pad_id(), serde_json::json!({}))
    };
    let (train, val) = split_corpus(&docs, vocab_size, a.context_length, pad, a.val_fraction, a.seed)?;
    fs::create_dir_all(&a.out_dir)?;
    train.save(a.out_dir.join("train.tok"))?;
    val.save(a.out_dir.join("val.tok"))?;
    let mut summary = serde_json::json!({
        "documents": docs.len(),
        "vocab_size": vocab_size,
        "pad_id": pad,
        "context_length": a.context_length,
        "train_sequences": train.len(),
        "train_tokens": train.num_tokens(),
        "val_sequences": val.len(),
        "val_tokens": val.num_tokens(),
        "source_digest": train.source_digest(),
    });
    summary.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    fs::write(a.out_dir.join("ingest.json"), serde_json::to_vec_pretty(&summary)?)?;
    print_json(&summary)
}

fn cache(a: CacheArgs) -> anyhow::Result<()> {
    let teacher: TransformerModel<f32> = checkpoint::load(&a.teacher).context("loading teacher")?;
    let data = TokenDataset::load(&a.data)?;
    if data.vocab_size() != teacher.config().vocab_size {
        bail!("data vocabulary {} differs from the teacher's {}", data.vocab_size(), teacher.config().vocab_size);
    }
    let layer = a.layer.unwrap_or_else(|| median_layer_index(teacher.config()));
    let opts = CacheOptions {
        layer,
        top_k: a.top_k,
        logit_dtype: a.logit_dtype.into(),
        activation_dtype: a.activation_dtype.into(),
    };
    let header = cache_teacher(&teacher, data.sequences(), opts, &a.out)?;
    let est = storage_estimate(StorageParams {
        num_tokens: data.num_tokens(),
        num_sequences: data.len() as u64,
        vocab_size: header.vocab_size as usize,
        top_k: a.top_k,
        d_teacher: header.d_teacher as usize,
        logit_dtype: opts.logit_dtype,
        activation_dtype: opts.activation_dtype,
    });
    print_json(&serde_json::json!({
        "layer": layer,
        "top_k": a.top_k,
        "sequences": data.len(),
        "tokens": data.num_tokens(),
        "bytes": fs::metadata(&a.out)?.len(),
        "estimate": est,
    }))
}

fn methods(arg: &str) -> anyhow::Result<Vec<Method>> {
    if arg == "all" {
        Ok(Method::ALL.to_vec())
    } else {
        arg.split(',').map(|m| Ok(m.trim().parse()?)).collect()
    }
}

fn plan_flops(a: PlanArgs) -> anyhow::Result<()> {
    let (fc, ot, p1) = match FlopsConfig::load(&a.config) {
        Ok(fc) => (fc, 1.0, 0.05),
        Err(_) => {
            let tc = TrainConfig::load(&a.config)?;
            (tc.flops_config(), tc.ot, tc.phase1_fraction)
        }
    };
    let ot = a.ot.unwrap_or(ot);
    let p1 = a.p1.unwrap_or(p1);
    let ms = methods(&a.method)?;
    if a.out.is_some() && ms.len() != 1 {
        bail!("--out needs a single --method");
    }
    let mut rows = Vec::new();
    for m in &ms {
        let plan = fc.plan(*m, ot, p1)?;
        let c_data = plan.cost_model.c_data();
        for ph in &plan.phases {
            rows.push(serde_json::json!({
                "method": m,
                "phase": ph.phase,
                "per_token_flops": ph.per_token_cost,
                "relative_cost": ph.per_token_cost / c_data,
                "steps": ph.steps,
                "tokens": ph.tokens,
                "flops": ph.flops(),
            }));
        }
        if let Some(out) = &a.out {
            plan.save(out)?;
        }
    }
    let cm = fc.cost_model(Method::Nll);
    print_json(&serde_json::json!({
        "ot": ot,
        "budget_flops": hldlab::flops::ot_budget(ot, &cm)?,
        "budget_tokens": hldlab::flops::ot_tokens(ot, &cm),
        "phases": rows,
    }))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let plan = match &a.plan {
        Some(p) => FlopsPlan::load(p)?,
        None => cfg.plan(a.method)?,
    };
    let train_path = cfg.train_data.clone().context("config lacks train_data")?;
    let train = TokenDataset::load(&train_path)?;
    let val = cfg.val_data.as_ref().map(TokenDataset::load).transpose()?;
    let mut reader = a.cache.as_ref().map(open_cache).transpose()?;
    fs::create_dir_all(&a.out)?;
    plan.save(a.out.join("plan.json"))?;
    log::info!("{}: {} steps over {} phase(s)", a.method, plan.total_steps(), plan.phases.len());
    let out = run::<f32>(RunInputs {
        method: a.method,
        config: &cfg,
        plan: &plan,
        train: &train,
        val: val.as_ref(),
        teacher: reader.as_mut().map(|r| r as &mut dyn TeacherSource),
        seed: cfg.seed,
    })?;
    write_metrics_csv(File::create(a.out.join("metrics.csv"))?, &out.metrics)?;
    checkpoint::save(&out.model, a.out.join("model.ckpt"))?;
    if let Some(m) = &out.after_hint_training {
        checkpoint::save(m, a.out.join("after_hint_training.ckpt"))?;
    }
    let summary = serde_json::json!({
        "method": a.method,
        "steps": out.metrics.len(),
        "realized_flops": out.realized_flops,
        "budget_flops": plan.total_budget_flops,
        "final_train_loss": out.metrics.last().map(|m| m.loss),
        "final_val_log_ppl": out.final_eval,
    });
    fs::write(a.out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    print_json(&summary)
}

fn named(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(arg);
            let n = p.file_stem().map_or(arg.to_string(), |s| s.to_string_lossy().into_owned());
            (n, p)
        }
    }
}

fn evaluate(a: EvalArgs) -> anyhow::Result<()> {
    let model: TransformerModel<f32> = checkpoint::load(&a.checkpoint)?;
    let tok = match &a.vocab {
        Some(v) => Tokenizer::from_vocab_file(v)?,
        None => Tokenizer::Byte,
    };
    let mut reports = Vec::new();
    for d in &a.data {
        let (name, path) = named(d);
        reports.push(log_perplexity(&model, &TokenDataset::load(&path)?, &name)?);
    }
    for m in &a.mc {
        let (name, path) = named(m);
        reports.push(mc_error_rate(&model, &load_mc_jsonl(&path, &tok)?, a.norm, &name)?);
    }
    print_json(&serde_json::to_value(reports)?)
}

fn grid(a: GridArgs) -> anyhow::Result<()> {
    let spec = GridSpec::load(&a.spec)?;
    let base_path = a.base.or_else(|| spec.base.clone()).context("no base config (spec `base` or --base)")?;
    let base = TrainConfig::load(&base_path)?;
    let train = TokenDataset::load(base.train_data.as_ref().context("base config lacks train_data")?)?;
    let suite = EvalSuite::from_spec(&spec, &base)?;
    let cache = spec.teacher_cache.clone();
    let records = run_grid(&spec, &base, &a.out, |cell, cfg, dir| {
        harness::train_cell(cell, cfg, dir, &train, cache.as_deref(), &suite)
    })?;
    let failed = records.iter().filter(|r| !r.ok()).count();
    print_json(&serde_json::json!({
        "runs": records.len(),
        "failed": failed,
        "compute_spread": harness::compute_spread(&records),
    }))?;
    if failed > 0 {
        log::warn!("{failed} cell(s) failed; rerun the grid to retry them");
    }
    Ok(())
}

fn output(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let records = load_records(&a.runs).with_context(|| format!("reading records under {}", a.runs.display()))?;
    let out = output(&a.out)?;
    let metric = || a.metric.clone().context("--metric is required for this report");
    match a.kind {
        ReportKind::Full => harness::write_full_table(out, &records)?,
        ReportKind::Best => {
            let names = match &a.metric {
                Some(m) => m.split(',').map(String::from).collect(),
                None => metric_names(&records),
            };
            harness::write_best_table(out, &records, &names)?
        }
        ReportKind::Hist => harness::write_histogram(out, &pointwise_improvement(&records, &metric()?))?,
        ReportKind::Scatter => harness::write_scatter(out, &pointwise_improvement(&records, &metric()?))?,
    }
    Ok(())
}
