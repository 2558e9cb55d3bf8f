//! Hyperparameter grids, resumable execution, and the comparison tables.
//!
//! Pairing follows the baselines: NLL varies with η alone, KD with (η, τ, α),
//! HLDC adds γ and HLDF adds P₁ (with η_HT = η). Every cell lives in its own
//! directory named by a digest of the cell and the base config, so rerunning a
//! grid only trains what is missing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{TokenDataset, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::{load_mc_jsonl, log_perplexity, mc_error_rate, ChoiceNorm, MultipleChoiceItem};
use crate::objectives::Method;
use crate::teacher_cache::open_cache;
use crate::trainer::{run, write_metrics_csv, RunInputs, TeacherSource, TrainConfig};

fn one() -> f64 {
    1.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_parallelism() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub methods: Vec<Method>,
    pub lr: Vec<f64>,
    #[serde(default)]
    pub temperature: Vec<f64>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub phase1_fraction: Vec<f64>,
    /// Shared budget in overtraining units.
    #[serde(default = "one")]
    pub ot: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,

    /// Base training config; grid values override it per cell.
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub teacher_cache: Option<PathBuf>,
    /// Extra tokenized sets scored by log-perplexity, keyed by column name.
    #[serde(default)]
    pub eval: BTreeMap<String, PathBuf>,
    /// Multiple-choice JSONL sets scored by error rate.
    #[serde(default)]
    pub mc_eval: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub mc_normalization: Option<String>,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
}

impl GridSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec: GridSpec = toml::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        spec.base.iter_mut().for_each(rebase);
        spec.teacher_cache.iter_mut().for_each(rebase);
        spec.vocab.iter_mut().for_each(rebase);
        spec.eval.values_mut().for_each(rebase);
        spec.mc_eval.values_mut().for_each(rebase);
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("grid needs at least one {what}")))
            }
        };
        if self.methods.is_empty() {
            return Ok(());
        }
        need(!self.lr.is_empty(), "learning rate")?;
        need(!self.seeds.is_empty(), "seed")?;
        let distills = self.methods.iter().any(|m| m.needs_teacher());
        need(!distills || !self.temperature.is_empty(), "temperature")?;
        need(!distills || !self.alpha.is_empty(), "alpha")?;
        need(!self.methods.contains(&Method::Hldc) || !self.gamma.is_empty(), "gamma")?;
        need(!self.methods.contains(&Method::Hldf) || !self.phase1_fraction.is_empty(), "phase-1 fraction")?;
        if !(self.ot > 0.0) {
            return Err(Error::Config(format!("budget of {} OT", self.ot)));
        }
        Ok(())
    }

    /// All cells in a fixed order: methods as listed, then η, τ, α, γ/P₁, seed.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        let mut methods = self.methods.clone();
        methods.dedup();
        for &method in &methods {
            for &lr in &self.lr {
                let distill: Vec<(Option<f64>, Option<f64>)> = if method == Method::Nll {
                    vec![(None, None)]
                } else {
                    let mut v = Vec::new();
                    for &t in &self.temperature {
                        for &a in &self.alpha {
                            v.push((Some(t), Some(a)));
                        }
                    }
                    v
                };
                for (temperature, alpha) in distill {
                    let extras: Vec<(Option<f64>, Option<f64>)> = match method {
                        Method::Hldc => self.gamma.iter().map(|&g| (Some(g), None)).collect(),
                        Method::Hldf => self.phase1_fraction.iter().map(|&p| (None, Some(p))).collect(),
                        _ => vec![(None, None)],
                    };
                    for (gamma, phase1_fraction) in extras {
                        for &seed in &self.seeds {
                            out.push(GridCell {
                                method,
                                lr,
                                temperature,
                                alpha,
                                gamma,
                                phase1_fraction,
                                seed,
                                ot: self.ot,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// One training run of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub method: Method,
    pub lr: f64,
    pub temperature: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub phase1_fraction: Option<f64>,
    pub seed: u64,
    pub ot: f64,
}

impl GridCell {
    /// Digest of the cell together with the config it overrides.
    pub fn run_id(&self, base: &TrainConfig) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("cells serialize"));
        h.update(serde_json::to_vec(base).expect("configs serialize"));
        let d = h.finalize();
        let hex: String = d[..8].iter().map(|b| format!("{b:02x}")).collect();
        format!("{}-{hex}", self.method.as_str().to_lowercase())
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.lr = self.lr;
        cfg.lr_ht = Some(self.lr);
        cfg.ot = self.ot;
        cfg.seed = self.seed;
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        cfg.phase1_fraction = self.phase1_fraction.unwrap_or(0.0);
        cfg
    }
}

/// What a cell runner reports back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub metrics: Vec<(String, f64)>,
    pub cumulative_flops: f64,
    pub budget_flops: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub method: Method,
    pub lr: f64,
    pub phase1_fraction: f64,
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub gamma: Option<f64>,
    pub seed: u64,
    /// Final value per evaluation set, lower is better throughout.
    pub metrics: Vec<(String, f64)>,
    pub cumulative_flops: f64,
    pub budget_flops: f64,
    pub checkpoint: Option<PathBuf>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn from_cell(cell: &GridCell, run_id: String, outcome: std::result::Result<CellOutcome, String>) -> Self {
        let (o, error) = match outcome {
            Ok(o) => (o, None),
            Err(e) => (
                CellOutcome {
                    metrics: Vec::new(),
                    cumulative_flops: 0.0,
                    budget_flops: 0.0,
                    checkpoint: None,
                },
                Some(e),
            ),
        };
        RunRecord {
            run_id,
            method: cell.method,
            lr: cell.lr,
            phase1_fraction: cell.phase1_fraction.unwrap_or(0.0),
            alpha: cell.alpha,
            temperature: cell.temperature,
            gamma: cell.gamma,
            seed: cell.seed,
            metrics: o.metrics,
            cumulative_flops: o.cumulative_flops,
            budget_flops: o.budget_flops,
            checkpoint: o.checkpoint,
            error,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

pub const RECORD_FILE: &str = "record.json";

pub fn load_records(runs_dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(runs_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RECORD_FILE).is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        out.push(serde_json::from_slice(&fs::read(d.join(RECORD_FILE))?)?);
    }
    Ok(out)
}

/// Runs every cell not already completed under `out_dir`. `runner` gets the
/// cell, its effective config and its private directory. Failures become
/// records with an error and do not stop the grid.
pub fn run_grid<F>(spec: &GridSpec, base: &TrainConfig, out_dir: &Path, runner: F) -> Result<Vec<RunRecord>>
where
    F: Fn(&GridCell, &TrainConfig, &Path) -> Result<CellOutcome> + Sync,
{
    spec.validate()?;
    let cells = spec.cells();
    fs::create_dir_all(out_dir)?;
    let slots: Vec<Mutex<Option<RunRecord>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(cell) = cells.get(i) else { return Ok(()) };
            let id = cell.run_id(base);
            let dir = out_dir.join(&id);
            let record_path = dir.join(RECORD_FILE);
            if record_path.is_file() {
                let rec: RunRecord = serde_json::from_slice(&fs::read(&record_path)?)?;
                if rec.ok() {
                    log::info!("{id}: already complete");
                    *slots[i].lock().unwrap() = Some(rec);
                    continue;
                }
            }
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("cell.json"), serde_json::to_vec_pretty(cell)?)?;
            log::info!("{id}: training");
            let outcome = runner(cell, &cell.apply(base), &dir).map_err(|e| {
                log::warn!("{id} failed: {e}");
                e.to_string()
            });
            let rec = RunRecord::from_cell(cell, id, outcome);
            fs::write(&record_path, serde_json::to_vec_pretty(&rec)?)?;
            *slots[i].lock().unwrap() = Some(rec);
        }
    };
    let workers = spec.parallelism.clamp(1, cells.len().max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers).map(|_| s.spawn(work)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("grid worker panicked"))
            .collect::<Result<Vec<()>>>()
    })?;
    Ok(slots.into_iter().map(|m| m.into_inner().unwrap().expect("every cell ran")).collect())
}

/// Evaluation sets shared by all cells.
#[derive(Default)]
pub struct EvalSuite {
    pub log_ppl: Vec<(String, TokenDataset)>,
    pub multiple_choice: Vec<(String, Vec<MultipleChoiceItem>)>,
    pub normalization: ChoiceNorm,
}

impl EvalSuite {
    pub fn from_spec(spec: &GridSpec, base: &TrainConfig) -> Result<Self> {
        let mut suite = EvalSuite::default();
        if let Some(v) = &base.val_data {
            suite.log_ppl.push(("val".into(), TokenDataset::load(v)?));
        }
        for (name, path) in &spec.eval {
            suite.log_ppl.push((name.clone(), TokenDataset::load(path)?));
        }
        let tokenizer = match &spec.vocab {
            Some(p) => Tokenizer::from_vocab_file(p)?,
            None => Tokenizer::Byte,
        };
        for (name, path) in &spec.mc_eval {
            suite.multiple_choice.push((name.clone(), load_mc_jsonl(path, &tokenizer)?));
        }
        if let Some(n) = &spec.mc_normalization {
            suite.normalization = n.parse()?;
        }
        Ok(suite)
    }

    pub fn evaluate<T: crate::tensor::Real>(&self, model: &crate::model::TransformerModel<T>) -> Result<Vec<(String, f64)>> {
        let mut out = Vec::new();
        for (name, ds) in &self.log_ppl {
            out.push((name.clone(), log_perplexity(model, ds, name)?.value));
        }
        for (name, items) in &self.multiple_choice {
            out.push((name.clone(), mc_error_rate(model, items, self.normalization, name)?.value));
        }
        Ok(out)
    }
}

/// Trains one cell for real: plan, train in f32, evaluate, checkpoint.
pub fn train_cell(
    cell: &GridCell,
    cfg: &TrainConfig,
    dir: &Path,
    train: &TokenDataset,
    cache: Option<&Path>,
    suite: &EvalSuite,
) -> Result<CellOutcome> {
    let plan = cfg.plan(cell.method)?;
    plan.save(dir.join("plan.json"))?;
    let mut reader = match (cell.method.needs_teacher(), cache) {
        (true, Some(p)) => Some(open_cache(p)?),
        (true, None) => return Err(Error::Cache(format!("{} needs a teacher cache", cell.method))),
        _ => None,
    };
    let val = suite.log_ppl.first().map(|(_, d)| d);
    let out = run::<f32>(RunInputs {
        method: cell.method,
        config: cfg,
        plan: &plan,
        train,
        val,
        teacher: reader.as_mut().map(|r| r as &mut dyn TeacherSource),
        seed: cfg.seed,
    })?;
    write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, &out.metrics)?;
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&out.model, &ckpt)?;
    Ok(CellOutcome {
        metrics: suite.evaluate(&out.model)?,
        cumulative_flops: out.realized_flops,
        budget_flops: plan.total_budget_flops,
        checkpoint: Some(ckpt),
    })
}

/// Largest relative gap between realized FLOPs of successful records.
pub fn compute_spread(records: &[RunRecord]) -> f64 {
    let f: Vec<f64> = records.iter().filter(|r| r.ok()).map(|r| r.cumulative_flops).collect();
    let (lo, hi) = f.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if f.is_empty() || lo <= 0.0 {
        return 0.0;
    }
    hi / lo - 1.0
}

/// One method cell compared with its KD partner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub method: Method,
    pub lr: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub gamma: Option<f64>,
    pub phase1_fraction: f64,
    pub seed: u64,
    pub baseline: f64,
    pub value: f64,
    /// `baseline − value`; positive when the method beats KD.
    pub delta: f64,
}

type Key = (u64, u64, u64, u64);

fn key(lr: f64, t: f64, a: f64, seed: u64) -> Key {
    (lr.to_bits(), t.to_bits(), a.to_bits(), seed)
}

/// Pairs every non-KD record with the KD record at the shared (η, τ, α, seed).
/// NLL has no τ or α, so it is compared with every KD cell at its η.
pub fn pointwise_improvement(records: &[RunRecord], metric: &str) -> Vec<Improvement> {
    let mut kd: BTreeMap<Key, (f64, f64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.ok() && r.method == Method::Kd) {
        if let (Some(t), Some(a), Some(v)) = (r.temperature, r.alpha, r.metric(metric)) {
            kd.insert(key(r.lr, t, a, r.seed), (t, a, v));
        }
    }
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.ok() && r.method != Method::Kd) {
        let Some(value) = r.metric(metric) else { continue };
        let partners: Vec<(f64, f64, f64)> = match (r.temperature, r.alpha) {
            (Some(t), Some(a)) => kd.get(&key(r.lr, t, a, r.seed)).copied().into_iter().collect(),
            _ => kd
                .iter()
                .filter(|(k, _)| k.0 == r.lr.to_bits() && k.3 == r.seed)
                .map(|(_, &v)| v)
                .collect(),
        };
        if partners.is_empty() {
            log::warn!("{}: no KD baseline at its hyperparameters", r.run_id);
        }
        for (t, a, baseline) in partners {
            out.push(Improvement {
                method: r.method,
                lr: r.lr,
                temperature: t,
                alpha: a,
                gamma: r.gamma,
                phase1_fraction: r.phase1_fraction,
                seed: r.seed,
                baseline,
                value,
                delta: baseline - value,
            });
        }
    }
    // total order over every field, so the output never depends on input order
    let fields = |r: &Improvement| {
        let g = r.gamma.unwrap_or(f64::NEG_INFINITY);
        [r.lr, r.temperature, r.alpha, g, r.phase1_fraction, r.baseline, r.value]
    };
    out.sort_by(|x, y| {
        (x.method, x.seed).cmp(&(y.method, y.seed)).then_with(|| {
            fields(x)
                .iter()
                .zip(fields(y))
                .map(|(a, b)| a.total_cmp(&b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    out
}

/// Best (lowest) value per method and metric; `None` when a method has no
/// successful record carrying the metric.
pub fn best_table(records: &[RunRecord], metrics: &[String]) -> Vec<(Method, Vec<Option<f64>>)> {
    Method::ALL
        .iter()
        .filter(|m| records.iter().any(|r| r.ok() && r.method == **m))
        .map(|&m| {
            let row = metrics
                .iter()
                .map(|name| {
                    records
                        .iter()
                        .filter(|r| r.ok() && r.method == m)
                        .filter_map(|r| r.metric(name))
                        .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.min(v))))
                })
                .collect();
            (m, row)
        })
        .collect()
}

/// Metric names in first-seen order across records.
pub fn metric_names(records: &[RunRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in records {
        for (n, _) in &r.metrics {
            if seen.insert(n.clone()) {
                out.push(n.clone());
            }
        }
    }
    out
}

pub const RUN_TABLE_COLUMNS: [&str; 6] = ["Method", "η", "P₁", "α", "τ", "γ"];
const MISSING: &str = "--";

fn opt(v: Option<f64>) -> String {
    v.map_or(MISSING.to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == MISSING {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?}")))
}

/// The full run table: hyperparameter columns then one column per metric. A
/// seed column is appended only when records span several seeds.
pub fn write_full_table<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let metrics = metric_names(records);
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = RUN_TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(metrics.iter().cloned());
    if seeds.len() > 1 {
        header.push("seed".into());
    }
    w.write_record(&header)?;
    let mut sorted: Vec<&RunRecord> = records.iter().filter(|r| r.ok()).collect();
    sorted.sort_by(|a, b| {
        (a.method, a.lr, a.phase1_fraction, a.alpha, a.temperature, a.gamma, a.seed)
            .partial_cmp(&(b.method, b.lr, b.phase1_fraction, b.alpha, b.temperature, b.gamma, b.seed))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    for r in sorted {
        let mut row = vec![
            r.method.to_string(),
            r.lr.to_string(),
            p1_text(r.phase1_fraction),
            opt(r.alpha),
            opt(r.temperature),
            opt(r.gamma),
        ];
        row.extend(metrics.iter().map(|m| opt(r.metric(m))));
        if seeds.len() > 1 {
            row.push(r.seed.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn p1_text(p: f64) -> String {
    if p == 0.0 {
        "0.00".into()
    } else {
        p.to_string()
    }
}

/// Hyperparameters and metrics read back from a full run table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: Method,
    pub lr: f64,
    pub phase1_fraction: f64,
    pub alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub gamma: Option<f64>,
    pub metrics: Vec<(String, Option<f64>)>,
    pub seed: Option<u64>,
}

pub fn read_full_table(text: &str) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header.len() < RUN_TABLE_COLUMNS.len() || header[..6] != RUN_TABLE_COLUMNS {
        return Err(Error::Format(format!("unexpected run-table header {header:?}")));
    }
    let has_seed = header.last().map(String::as_str) == Some("seed");
    let metric_end = header.len() - has_seed as usize;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| parse_opt(&rec[i]);
        out.push(TableRow {
            method: rec[0].parse()?,
            lr: num(1)?.ok_or_else(|| Error::Format("missing η".into()))?,
            phase1_fraction: num(2)?.unwrap_or(0.0),
            alpha: num(3)?,
            temperature: num(4)?,
            gamma: num(5)?,
            metrics: (6..metric_end).map(|i| Ok((header[i].clone(), num(i)?))).collect::<Result<_>>()?,
            seed: if has_seed {
                Some(rec[metric_end].parse().map_err(|_| Error::Format("bad seed".into()))?)
            } else {
                None
            },
        });
    }
    Ok(out)
}

pub fn write_best_table<W: Write>(out: W, records: &[RunRecord], metrics: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["Method".to_string()];
    header.extend(metrics.iter().cloned());
    w.write_record(&header)?;
    for (m, row) in best_table(records, metrics) {
        let mut line = vec![m.to_string()];
        line.extend(row.into_iter().map(opt));
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}

/// Histogram source: one Δ per compared cell.
pub fn write_histogram<W: Write>(out: W, rows: &[Improvement]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "eta", "tau", "alpha", "gamma", "p1", "seed", "delta"])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.lr.to_string(),
            r.temperature.to_string(),
            r.alpha.to_string(),
            opt(r.gamma),
            r.phase1_fraction.to_string(),
            r.seed.to_string(),
            r.delta.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Scatter source: KD score on x, method score on y.
pub fn write_scatter<W: Write>(out: W, rows: &[Improvement]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "eta", "tau", "alpha", "gamma", "p1", "seed", "kd", "value"])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.lr.to_string(),
            r.temperature.to_string(),
            r.alpha.to_string(),
            opt(r.gamma),
            r.phase1_fraction.to_string(),
            r.seed.to_string(),
            r.baseline.to_string(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
