//! Acceptance criteria 1 to 9, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines are always printed; the
//! process exits non-zero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hldlab::data::{MarkovSource, Split, TokenDataset};
use hldlab::eval::{log_perplexity, mc_error_rate, ChoiceNorm, MultipleChoiceItem, RandomScorer, TokenScorer};
use hldlab::flops::{ot_budget, ot_tokens, plan, CostModel, FlopsConfig, FlopsPlan};
use hldlab::harness::{load_records, read_full_table, RunRecord, RUN_TABLE_COLUMNS};
use hldlab::model::ParamRole;
use hldlab::objectives::{
    combine_hldc, combine_kd, kl_topk, nll_loss, DistillConfig, Method, Phase, TopKLogits,
};
use hldlab::teacher_cache::{
    storage_estimate, write_teacher_cache, CacheDtype, CacheOptions, CacheReader, CacheWriter, StorageParams,
};
use hldlab::trainer::{read_metrics_csv, run, stream_seed, RunInputs, RunOutput, TeacherSource, TrainConfig, STREAM_INIT};
use hldlab::{Tape, Tensor, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(budget: Duration, start: Instant) -> Result<(), String> {
    let spent = start.elapsed();
    ensure(spent <= budget, format!("took {spent:.1?}, limit {budget:?}"))
}

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// 1 -------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut count = 0;
    for seed in 0..10 {
        for (name, err) in support::catalogue::all(seed) {
            count += 1;
            if err > worst.1 {
                worst = (name, err);
            }
        }
    }
    ensure(worst.1 < 1e-4, format!("{} relative error {:e}", worst.0, worst.1))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("{count} checks over 10 seeds, worst {:.1e} ({}), {:.1?}", worst.1, worst.0, start.elapsed()))
}

// 2 -------------------------------------------------------------------------

fn loss_value(f: impl Fn(&mut Tape<f64>) -> hldlab::Var) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t);
    t.scalar(v)
}

fn tiny_config() -> TrainConfig {
    toml::from_str(
        "num_layers = 2\nd_emb = 16\nnum_heads = 2\nd_ff = 32\nvocab_size = 8\ncontext_length = 8\n\
         lr = 1e-2\ntop_k = 4\nbatch_size = 4\nd_teacher = 16\nwarmup_steps = 5\ntie_embeddings = false\n",
    )
    .unwrap()
}

fn tiny_data(seed: u64, n: usize) -> TokenDataset {
    let src = MarkovSource::circulant_with_entropy(7, 0.5).unwrap();
    let docs: Vec<Vec<u32>> = (0..n).map(|i| src.sample(8, seed * 1000 + i as u64)).collect();
    TokenDataset::from_documents(&docs, 8, 8, 7, Split::Train).unwrap()
}

fn tiny_cache(cfg: &TrainConfig, data: &TokenDataset) -> CacheReader<Cursor<Vec<u8>>> {
    let teacher = TransformerModel::<f64>::init(cfg.model_config(), 99).unwrap();
    let opts = CacheOptions {
        layer: 1,
        top_k: cfg.top_k,
        logit_dtype: CacheDtype::F32,
        activation_dtype: CacheDtype::F32,
    };
    let mut buf = Vec::new();
    write_teacher_cache(&teacher, data.sequences(), opts, &mut buf).unwrap();
    CacheReader::new(Cursor::new(buf)).unwrap()
}

fn plan_for(method: Method, cfg: &TrainConfig, steps: u64, p1: f64) -> FlopsPlan {
    let fc = cfg.flops_config();
    let cm = fc.cost_model(method);
    let tps = fc.tokens_per_step();
    plan(method, &cm, steps as f64 * tps as f64 * cm.c_data(), tps, p1).unwrap()
}

fn train_tiny(method: Method, cfg: &TrainConfig, p: &FlopsPlan, data: &TokenDataset) -> RunOutput<f64> {
    let mut cache = tiny_cache(cfg, data);
    run(RunInputs {
        method,
        config: cfg,
        plan: p,
        train: data,
        val: None,
        teacher: Some(&mut cache as &mut dyn TeacherSource),
        seed: 11,
    })
    .unwrap()
}

fn loss_identities() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits = support::random(&mut r, vec![6, 9], 2.0);
        let tokens: Vec<u32> = (0..6).map(|_| r.random_range(0..9)).collect();
        let topk = support::catalogue::teacher(&mut r, 6, 9, 4);
        let hidden = support::random(&mut r, vec![6, 5], 1.0);
        let target = support::random(&mut r, vec![6, 5], 1.0);
        let tau = r.random_range(0.5..2.0);
        let alpha = r.random_range(0.1..0.9);
        let parts = |t: &mut Tape<f64>| {
            let l = t.constant(logits.clone());
            let nll = nll_loss(t, l, &tokens).unwrap();
            let kl = kl_topk(t, &topk, l, tau, false).unwrap();
            (nll, kl)
        };
        let nll = loss_value(|t| parts(t).0);
        let kl = loss_value(|t| parts(t).1);
        let kd = |a: f64| {
            loss_value(|t| {
                let (n, k) = parts(t);
                combine_kd(t, n, k, a).unwrap()
            })
        };
        let cfg = DistillConfig {
            alpha,
            beta: None,
            gamma: 0.0,
            temperature: tau,
            top_k: 4,
            teacher_layer: 1,
            student_layer: 1,
            phase1_fraction: 0.0,
            renormalize_student: false,
        };
        let hldc = loss_value(|t| {
            let (n, k) = parts(t);
            let h = t.constant(hidden.clone());
            let g = t.constant(target.clone());
            let emb = hldlab::objectives::normalized_mse(t, g, h).unwrap();
            combine_hldc(t, n, k, emb, &cfg).unwrap()
        });
        worst = worst.max((kd(0.0) - nll).abs()).max((kd(1.0) - kl).abs()).max((hldc - kd(alpha)).abs());
    }
    ensure(worst < 1e-6, format!("closed-form identities off by {worst:e}"))?;

    let cfg = tiny_config();
    let data = tiny_data(2, 16);
    let kd = train_tiny(Method::Kd, &cfg, &plan_for(Method::Kd, &cfg, 20, 0.0), &data);
    let hldf = train_tiny(Method::Hldf, &cfg, &plan_for(Method::Hldf, &cfg, 20, 0.0), &data);
    ensure(kd.metrics.len() == hldf.metrics.len(), "step counts differ")?;
    let loss_gap = kd.metrics.iter().zip(&hldf.metrics).map(|(a, b)| (a.loss - b.loss).abs()).fold(0.0, f64::max);
    ensure(loss_gap <= 1e-6, format!("per-step losses differ by {loss_gap:e}"))?;
    let same = kd.model.params().iter().zip(hldf.model.params()).all(|(a, b)| a.data() == b.data());
    ensure(same, "HLDF with P1=0 diverged from KD parameters")?;
    within(Duration::from_secs(300), start)?;
    Ok(format!("identities within {worst:.1e}; HLDF(P1=0) matches KD bit-for-bit over {} steps", kd.metrics.len()))
}

// 3 -------------------------------------------------------------------------

fn flops_accounting() -> Outcome {
    let start = Instant::now();
    let small = FlopsConfig::load(root().join("configs/student_123m.toml")).map_err(|e| e.to_string())?;
    let kd = small.cost_model(Method::Kd);
    let r_kd = kd.c_kd() / kd.c_data();
    let hldc = small.cost_model(Method::Hldc);
    let r_hldc = hldc.c_hldc() / hldc.c_data();
    let hldf = small.cost_model(Method::Hldf);
    let r_ht = hldf.c_ht() / hldf.c_data();
    let big = FlopsConfig::load(root().join("configs/student_27b_class.toml")).map_err(|e| e.to_string())?;
    let b = big.cost_model(Method::Hldf);
    let r_big = b.c_ht() / b.c_data();
    ensure(r_kd == 1.0, format!("C_KD/C_data = {r_kd}"))?;
    ensure((r_hldc - 1.027).abs() <= 0.015, format!("C_HLDC/C_data = {r_hldc}"))?;
    ensure((r_ht - 0.442).abs() <= 0.05, format!("C_HT/C_data = {r_ht}"))?;
    ensure((r_big - 0.5001).abs() <= 0.0005, format!("27B-class C_HT/C_data = {r_big}"))?;
    within(Duration::from_secs(1), start)?;
    Ok(format!("KD {r_kd:.3}, HLDC {r_hldc:.4}, HT {r_ht:.4}, 27B-class HT {r_big:.5}"))
}

// 4 -------------------------------------------------------------------------

fn ot_budgeting() -> Outcome {
    let small = FlopsConfig::load(root().join("configs/student_123m.toml")).map_err(|e| e.to_string())?;
    let cm = small.cost_model(Method::Nll);
    let tokens = ot_tokens(1.0, &cm);
    ensure(tokens == 2e9, format!("OT_1 = {tokens} tokens"))?;
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    while checked < 50 {
        let cm = CostModel {
            backbone_params: r.random_range(1e5..1e10),
            d_student: r.random_range(16.0..8192.0),
            d_teacher: r.random_range(16.0..16384.0),
            vocab_size: r.random_range(2.0..262144.0),
            regressor_params: r.random_range(0.0..1e9),
            teacher_cost: r.random_range(0.0..1e9),
        };
        let method = Method::ALL[r.random_range(0..4)];
        let tps = r.random_range(1..100_000u64);
        let budget = ot_budget(r.random_range(0.01..4.0), &cm).unwrap();
        let Ok(p) = plan(method, &cm, budget, tps, r.random_range(0.0..0.5)) else { continue };
        let realized = p.realized_flops();
        let step = p.phases.iter().map(|ph| ph.per_token_cost * tps as f64).fold(0.0, f64::max);
        ensure(
            realized <= budget * (1.0 + 1e-12) && budget - realized <= step * (1.0 + 1e-9),
            format!("{method}: budget {budget:e}, realized {realized:e}, step {step:e}"),
        )?;
        checked += 1;
    }
    Ok(format!("OT_1 = {tokens:e} tokens; {checked} random plans conserve the budget within one step"))
}

// 5 -------------------------------------------------------------------------

fn cache_fidelity() -> Outcome {
    let cfg = hldlab::ModelConfig {
        num_layers: 2,
        d_emb: 12,
        num_heads: 3,
        d_ff: 24,
        vocab_size: 20,
        context_length: 10,
        rms_eps: 1e-6,
        tie_embeddings: true,
    };
    let teacher = TransformerModel::<f32>::init(cfg, 5).map_err(|e| e.to_string())?;
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let corpus: Vec<Vec<u32>> = (0..7).map(|i| (0..3 + i).map(|_| r.random_range(0..20)).collect()).collect();
    let opts = CacheOptions {
        layer: 1,
        top_k: 6,
        logit_dtype: CacheDtype::F32,
        activation_dtype: CacheDtype::F32,
    };
    let mut bytes = Vec::new();
    let header = write_teacher_cache(&teacher, &corpus, opts, &mut bytes).map_err(|e| e.to_string())?;
    let mut reader = CacheReader::new(Cursor::new(bytes.clone())).map_err(|e| e.to_string())?;

    let lengths: Vec<u32> = corpus.iter().map(|s| s.len() as u32).collect();
    let mut rewritten = Vec::new();
    let mut w = CacheWriter::new(&mut rewritten, header, &lengths).map_err(|e| e.to_string())?;
    for (s, seq) in corpus.iter().enumerate() {
        let (logits, hidden) = teacher.infer(seq).map_err(|e| e.to_string())?;
        for (pos, rec) in reader.sequence(s).map_err(|e| e.to_string())?.into_iter().enumerate() {
            let live = TopKLogits::from_logits(logits.row(pos), 6);
            ensure(rec.logits == live, format!("sequence {s} position {pos}: cached top-k differs from live"))?;
            let act: Vec<f64> = hidden[1].row(pos).iter().map(|&v| v as f64).collect();
            ensure(rec.activation == act, format!("sequence {s} position {pos}: activation differs"))?;
            w.write_record(&rec.logits, &rec.activation).map_err(|e| e.to_string())?;
        }
    }
    w.finish().map_err(|e| e.to_string())?;
    ensure(rewritten == bytes, "write, read, write is not byte-identical")?;
    let est = storage_estimate(StorageParams {
        vocab_size: 20,
        top_k: 6,
        d_teacher: 12,
        logit_dtype: CacheDtype::F32,
        activation_dtype: CacheDtype::F32,
        num_sequences: corpus.len() as u64,
        num_tokens: lengths.iter().map(|&l| l as u64).sum(),
    });
    ensure(est.total_bytes == bytes.len() as u64, format!("estimate {} vs file {}", est.total_bytes, bytes.len()))?;
    Ok(format!("{} bytes round-trip bit-identical; top-k and activations equal the live f32 forward", bytes.len()))
}

// 6 and 8 --------------------------------------------------------------------

const ENTROPY: f64 = 0.9;

struct Oracle {
    dir: tempfile::TempDir,
    teacher_val: f64,
    records: Vec<RunRecord>,
    elapsed: Duration,
}

fn hldlab(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hldlab"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("hldlab {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn oracle_experiment() -> Result<Oracle, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let write = |name: &str, text: &str| fs::write(d.join(name), text).map_err(|e| e.to_string());
    write("markov.toml", &format!(
        "vocab_size = 32\nentropy = {ENTROPY}\nnum_documents = 400\ndocument_length = 640\nseed = 1\n"
    ))?;
    let common = "vocab_size = 33\ncontext_length = 32\nbatch_size = 8\nlr = 3e-3\n\
                  train_data = \"data/train.tok\"\nval_data = \"data/val.tok\"\n";
    write("teacher.toml", &format!("num_layers = 4\nd_emb = 128\nnum_heads = 4\nd_ff = 512\not = 0.01\n{common}"))?;
    write("student.toml", &format!(
        "num_layers = 2\nd_emb = 64\nnum_heads = 4\nd_ff = 256\ntie_embeddings = false\n\
         d_teacher = 128\ntop_k = 16\not = 0.25\n{common}"
    ))?;
    write("grid.toml",
        "methods = [\"NLL\", \"KD\", \"HLDC\", \"HLDF\"]\nlr = [3e-3]\ntemperature = [1.0]\nalpha = [0.9]\n\
         gamma = [0.1]\nphase1_fraction = [0.1]\not = 0.25\nbase = \"student.toml\"\nteacher_cache = \"teacher.cache\"\n")?;

    hldlab(d, &["ingest", "--markov", "markov.toml", "--context-length", "32", "--val-fraction", "0.3", "--out-dir", "data"])?;
    let summary = hldlab(d, &["train", "--method", "nll", "--config", "teacher.toml", "--out", "teacher"])?;
    let summary: serde_json::Value = serde_json::from_str(&summary).map_err(|e| e.to_string())?;
    let teacher_val = summary["final_val_log_ppl"].as_f64().ok_or("teacher summary lacks val loss")?;
    hldlab(d, &[
        "cache-teacher", "--teacher", "teacher/model.ckpt", "--data", "data/train.tok",
        "--layer", "2", "--top-k", "16", "--out", "teacher.cache",
    ])?;
    hldlab(d, &["grid", "--spec", "grid.toml", "--out", "runs"])?;
    let records = load_records(d.join("runs")).map_err(|e| e.to_string())?;
    Ok(Oracle {
        dir,
        teacher_val,
        records,
        elapsed: start.elapsed(),
    })
}

fn moving_average_falls(rows: &[hldlab::trainer::MetricRow]) -> bool {
    let w = 50.min(rows.len() / 2).max(1);
    let mean = |r: &[hldlab::trainer::MetricRow]| r.iter().map(|m| m.loss).sum::<f64>() / r.len() as f64;
    mean(&rows[rows.len() - w..]) < mean(&rows[..w])
}

fn end_to_end(o: &Oracle) -> Outcome {
    ensure(o.teacher_val <= ENTROPY + 0.05, format!("teacher val loss {:.4} above H + 0.05", o.teacher_val))?;
    ensure(o.records.len() == 4 && o.records.iter().all(RunRecord::ok), "grid did not produce four successful runs")?;
    let mut parts = Vec::new();
    for r in &o.records {
        let v = r.metric("val").ok_or("record lacks val metric")?;
        ensure(v >= ENTROPY - 0.01, format!("{} val {v:.4} below the information floor", r.method))?;
        ensure(v <= ENTROPY + 0.25, format!("{} val {v:.4} did not converge", r.method))?;
        let rows = read_metrics_csv(o.dir.path().join("runs").join(&r.run_id).join("metrics.csv"))
            .map_err(|e| e.to_string())?;
        // hint-phase rows carry the regression loss, which is not comparable
        let main: Vec<_> = rows.iter().filter(|m| m.phase == Phase::Main).cloned().collect();
        ensure(moving_average_falls(&main), format!("{} training loss did not fall", r.method))?;
        if r.method == Method::Hldf {
            let ht: Vec<_> = rows.iter().filter(|m| m.phase == Phase::HintTraining).collect();
            let peak = ht.iter().map(|m| m.lr).fold(0.0, f64::max);
            let after_warmup = ht.iter().find(|m| m.lr >= peak).and_then(|m| m.emb).ok_or("no post-warmup hint loss")?;
            let tail = ht[ht.len().saturating_sub(10)..].iter().filter_map(|m| m.emb).sum::<f64>() / 10f64.min(ht.len() as f64);
            let drop = 1.0 - tail / after_warmup;
            ensure(drop >= 0.5, format!("hint loss fell only {:.0}%", 100.0 * drop))?;
            parts.push(format!("hint loss -{:.0}%", 100.0 * drop));
        }
        parts.push(format!("{} {v:.4}", r.method));
    }
    let flops: Vec<f64> = o.records.iter().map(|r| r.cumulative_flops).collect();
    let (lo, hi) = flops.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    ensure(hi / lo - 1.0 <= 0.01, format!("realized FLOPs spread {:.3}%", 100.0 * (hi / lo - 1.0)))?;
    ensure(o.elapsed <= Duration::from_secs(20 * 60), format!("took {:.0?}", o.elapsed))?;
    Ok(format!(
        "H = {ENTROPY}, teacher {:.4}; {}; FLOPs spread {:.3}%; {:.0?}",
        o.teacher_val,
        parts.join(", "),
        100.0 * (hi / lo - 1.0),
        o.elapsed
    ))
}

fn report_schema(o: &Oracle) -> Outcome {
    let d = o.dir.path();
    let full = hldlab(d, &["report", "--runs", "runs", "--kind", "full"])?;
    let header: Vec<&str> = full.lines().next().ok_or("empty report")?.split(',').collect();
    let mut expected: Vec<&str> = RUN_TABLE_COLUMNS.to_vec();
    expected.push("val");
    ensure(header == expected, format!("full report header {header:?}"))?;
    let rows = read_full_table(&full).map_err(|e| e.to_string())?;
    ensure(rows.len() == o.records.len(), "full report row count")?;

    let best = hldlab(d, &["report", "--runs", "runs", "--kind", "best"])?;
    let mut lines = best.lines();
    ensure(lines.next() == Some("Method,val"), "best report header")?;
    for line in lines {
        let (m, v) = line.split_once(',').ok_or("malformed best row")?;
        let method: Method = m.parse().map_err(|e: hldlab::Error| e.to_string())?;
        let got: f64 = v.parse().map_err(|_| "bad best value")?;
        let scan = o
            .records
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.metric("val"))
            .fold(f64::INFINITY, f64::min);
        ensure(got == scan, format!("{method}: best {got} vs scan {scan}"))?;
    }
    Ok(format!("full columns {}; best argmin equals a brute-force scan", header.join(",")))
}

// 7 -------------------------------------------------------------------------

fn phase_isolation() -> Outcome {
    let mut checked = 0;
    for tied in [true, false] {
        let mut cfg = tiny_config();
        cfg.tie_embeddings = tied;
        let data = tiny_data(4, 16);
        let out = train_tiny(Method::Hldf, &cfg, &plan_for(Method::Hldf, &cfg, 40, 0.3), &data);
        let init = TransformerModel::<f64>::init(cfg.model_config(), stream_seed(11, STREAM_INIT)).unwrap();
        let mid = out.after_hint_training.as_ref().ok_or("no phase-1 snapshot")?;
        let half = cfg.student_layer();
        for ((role, name), (a, b)) in init.roles().iter().zip(init.names()).zip(init.params().iter().zip(mid.params())) {
            let frozen = match role {
                ParamRole::Layer(l) => *l >= half,
                ParamRole::Unembedding | ParamRole::FinalNorm => true,
                ParamRole::TokenEmbedding => tied,
                ParamRole::PositionEmbedding => false,
            };
            if frozen {
                ensure(a.data() == b.data(), format!("{name} moved during phase 1 (tied={tied})"))?;
                checked += 1;
            } else if matches!(role, ParamRole::Layer(_)) {
                ensure(a.data() != b.data(), format!("{name} never trained in phase 1"))?;
            }
        }
    }
    Ok(format!("{checked} upper-layer and de-embedding tensors bit-unchanged across phase 1"))
}

// 9 -------------------------------------------------------------------------

struct Uniform(usize);

impl TokenScorer for Uniform {
    fn vocab_size(&self) -> usize {
        self.0
    }
    fn context_length(&self) -> usize {
        64
    }
    fn logits(&self, tokens: &[u32]) -> hldlab::Result<Tensor<f64>> {
        Ok(Tensor::zeros(vec![tokens.len(), self.0]))
    }
    fn digest(&self) -> String {
        "uniform".into()
    }
}

fn evaluation_sanity() -> Outcome {
    let v = 50;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<Vec<u32>> = (0..40).map(|_| (0..1 + r.random_range(1..63)).map(|_| r.random_range(0..49)).collect()).collect();
    let ds = TokenDataset::new(v, 64, 49, Split::Val, seqs).map_err(|e| e.to_string())?;
    let lp = log_perplexity(&Uniform(v), &ds, "uniform").map_err(|e| e.to_string())?.value;
    ensure((lp - (v as f64).ln()).abs() <= 1e-6, format!("uniform log-ppl {lp} vs ln V"))?;

    let (n, c) = (2000usize, 4usize);
    let items: Vec<MultipleChoiceItem> = (0..n)
        .map(|_| MultipleChoiceItem {
            context: (0..r.random_range(1..10)).map(|_| r.random_range(0..v as u32)).collect(),
            choices: (0..c).map(|_| (0..r.random_range(1..5)).map(|_| r.random_range(0..v as u32)).collect()).collect(),
            gold: r.random_range(0..c),
        })
        .collect();
    let scorer = RandomScorer {
        vocab_size: v,
        context_length: 64,
        seed: 3,
    };
    let err = mc_error_rate(&scorer, &items, ChoiceNorm::PerTokenNll, "random").map_err(|e| e.to_string())?.value;
    let chance = (c - 1) as f64 / c as f64;
    let sigma = (chance * (1.0 - chance) / n as f64).sqrt();
    ensure((err - chance).abs() <= 3.0 * sigma, format!("random error rate {err:.4} vs chance {chance:.4}"))?;
    Ok(format!("uniform log-ppl = ln {v} to {:.1e}; random error {err:.4} vs {chance:.4} ± {:.4}", (lp - (v as f64).ln()).abs(), 3.0 * sigma))
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "loss reduction identities", loss_identities()),
        (3, "FLOPs accounting", flops_accounting()),
        (4, "OT budgeting", ot_budgeting()),
        (5, "cache fidelity", cache_fidelity()),
    ];
    let oracle = oracle_experiment();
    match &oracle {
        Ok(o) => results.push((6, "end-to-end oracle experiment", end_to_end(o))),
        Err(e) => results.push((6, "end-to-end oracle experiment", Err(e.clone()))),
    }
    results.push((7, "phase isolation", phase_isolation()));
    match &oracle {
        Ok(o) => results.push((8, "report schema", report_schema(o))),
        Err(e) => results.push((8, "report schema", Err(format!("no oracle grid: {e}")))),
    }
    results.push((9, "evaluation sanity", evaluation_sanity()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
