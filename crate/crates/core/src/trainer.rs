//! AdamW, learning-rate schedules, and the plan-driven training loop.
//!
//! A run executes exactly the steps its [`FlopsPlan`] allots. HLDF runs two
//! phases: hint training of the student prefix plus an MLP regressor under a
//! constant (after warmup) rate, then plain KD of the whole student with a
//! fresh optimizer and a fresh WSD schedule. The regressor is dropped after
//! phase one.

use std::fs;
use std::io::{Read, Seek, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{passes_required, EpochIterator, TokenDataset};
use crate::error::{Error, Result};
use crate::eval::log_perplexity;
use crate::flops::{FlopsConfig, FlopsPlan};
use crate::model::{median_layer_index, ModelConfig, Regressor, RegressorKind, TransformerModel};
use crate::objectives::{batch_loss, trainable_in, DistillConfig, Method, Phase, SequenceTargets, TopKLogits};
use crate::tape::Tape;
use crate::teacher_cache::{CacheHeader, CacheReader};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.1,
        }
    }
}

/// Moments for one parameter list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub hp: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(hp: AdamWConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        OptimizerState {
            hp,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay. Parameters whose gradient
/// is `None` are frozen: neither decayed nor moved.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config("parameter, gradient and moment lists differ in length".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(Error::Config(format!("gradient {i} has shape {:?}", g.shape())));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    step: state.step + 1,
                    what: format!("gradient of parameter {i}"),
                });
            }
        }
    }
    state.step += 1;
    let hp = state.hp;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let (ob1, ob2) = (T::of(1.0 - hp.beta1), T::of(1.0 - hp.beta2));
    let decay = T::of(1.0 - lr * hp.weight_decay);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (p, &gj)) in params[i].data_mut().iter_mut().zip(g.data()).enumerate() {
            *p *= decay;
            m[j] = b1 * m[j] + ob1 * gj;
            v[j] = b2 * v[j] + ob2 * gj * gj;
            let mhat = m[j].f64() / bc1;
            let vhat = v[j].f64() / bc2;
            *p -= T::of(lr * mhat / (vhat.sqrt() + hp.eps));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Warmup, stable plateau, linear decay to `floor_ratio · η`.
    Wsd,
    ConstantWithWarmup,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_fraction: f64,
    pub floor_ratio: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} must be below total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.decay_fraction) {
            return Err(Error::Config(format!("decay fraction {} outside [0, 1)", self.decay_fraction)));
        }
        if !(self.floor_ratio > 0.0 && self.floor_ratio <= 1.0) {
            return Err(Error::Config(format!("floor ratio {} outside (0, 1]", self.floor_ratio)));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("negative learning rate {}", self.peak_lr)));
        }
        Ok(())
    }
}

/// Learning rate after `step` updates; update `k` (1-based) uses `lr_at(k)`.
pub fn lr_at(s: &Schedule, step: u64) -> f64 {
    let step = step.min(s.total_steps) as f64;
    let warm = s.warmup_steps as f64;
    if step < warm {
        return s.peak_lr * step / warm;
    }
    match s.kind {
        ScheduleKind::ConstantWithWarmup => s.peak_lr,
        ScheduleKind::Wsd => {
            let total = s.total_steps as f64;
            let onset = (1.0 - s.decay_fraction) * total;
            if step <= onset {
                s.peak_lr
            } else {
                let frac = (step - onset) / (total - onset);
                s.peak_lr + (s.floor_ratio * s.peak_lr - s.peak_lr) * frac
            }
        }
    }
}

/// `max(20, 2%)` of the phase, kept below its length.
pub fn default_warmup(total_steps: u64) -> u64 {
    let w = 20u64.max((0.02 * total_steps as f64).ceil() as u64);
    w.min(total_steps.saturating_sub(1))
}

fn default_true() -> bool {
    true
}
fn default_rms_eps() -> f64 {
    1e-6
}
fn default_alpha() -> f64 {
    0.9
}
fn default_gamma() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_top_k() -> usize {
    128
}
fn default_p1() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-9
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_decay_fraction() -> f64 {
    0.1
}
fn default_floor() -> f64 {
    0.01
}
fn default_batch() -> usize {
    16
}
fn default_linear() -> RegressorKind {
    RegressorKind::Linear
}
fn default_mlp() -> RegressorKind {
    RegressorKind::Mlp
}
fn default_expansion() -> usize {
    4
}

/// Every knob of a run, read from a flat TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_layers: usize,
    pub d_emb: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,

    /// Teacher width; needed to price and build regressors.
    #[serde(default)]
    pub d_teacher: usize,
    /// Defaults to `floor(D/2)`.
    #[serde(default)]
    pub student_layer: Option<usize>,

    /// Peak learning rate η (η_KD for HLDF phase two).
    pub lr: f64,
    /// η_HT; defaults to `lr`.
    #[serde(default)]
    pub lr_ht: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_one")]
    pub temperature: f64,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_p1")]
    pub phase1_fraction: f64,
    #[serde(default)]
    pub renormalize_student: bool,
    #[serde(default = "default_linear")]
    pub hldc_regressor: RegressorKind,
    #[serde(default = "default_mlp")]
    pub hldf_regressor: RegressorKind,
    #[serde(default = "default_expansion")]
    pub regressor_expansion: usize,

    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Defaults to `max(20, 2%)` of each phase.
    #[serde(default)]
    pub warmup_steps: Option<u64>,
    #[serde(default = "default_decay_fraction")]
    pub decay_fraction: f64,
    #[serde(default = "default_floor")]
    pub floor_ratio: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,

    /// Budget in overtraining units.
    #[serde(default = "default_one")]
    pub ot: f64,

    #[serde(default)]
    pub train_data: Option<PathBuf>,
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    /// Evaluate on the validation split every this many steps; 0 means only
    /// at the end.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: TrainConfig = toml::from_str(&fs::read_to_string(path)?)?;
        // data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.train_data, &mut cfg.val_data].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            d_emb: self.d_emb,
            num_heads: self.num_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            context_length: self.context_length,
            rms_eps: self.rms_eps,
            tie_embeddings: self.tie_embeddings,
        }
    }

    pub fn student_layer(&self) -> usize {
        self.student_layer.unwrap_or_else(|| median_layer_index(&self.model_config()))
    }

    pub fn distill_config(&self, teacher_layer: usize) -> DistillConfig {
        DistillConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            temperature: self.temperature,
            top_k: self.top_k,
            teacher_layer,
            student_layer: self.student_layer(),
            phase1_fraction: self.phase1_fraction,
            renormalize_student: self.renormalize_student,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn flops_config(&self) -> FlopsConfig {
        FlopsConfig {
            backbone_params: self.model_config().backbone_param_count() as u64,
            d_student: self.d_emb,
            d_teacher: self.d_teacher,
            vocab_size: self.vocab_size,
            teacher_cost: 0.0,
            hldc_regressor: self.hldc_regressor,
            hldf_regressor: self.hldf_regressor,
            regressor_expansion: self.regressor_expansion,
            batch_size: self.batch_size,
            context_length: self.context_length,
        }
    }

    /// Compute-matched plan for `method` at this config's OT budget.
    pub fn plan(&self, method: Method) -> Result<FlopsPlan> {
        self.flops_config().plan(method, self.ot, self.phase1_fraction)
    }

    pub fn schedule(&self, kind: ScheduleKind, peak_lr: f64, total_steps: u64) -> Schedule {
        let warmup = self
            .warmup_steps
            .unwrap_or_else(|| default_warmup(total_steps))
            .min(total_steps.saturating_sub(1));
        Schedule {
            kind,
            peak_lr,
            warmup_steps: warmup,
            total_steps,
            decay_fraction: self.decay_fraction,
            floor_ratio: self.floor_ratio,
        }
    }
}

/// Supplier of per-sequence teacher targets, aligned with the training set.
pub trait TeacherSource {
    fn header(&self) -> &CacheHeader;
    fn num_sequences(&self) -> usize;
    fn sequence_len(&self, seq: usize) -> Result<usize>;
    fn targets(&mut self, seq: usize) -> Result<(Vec<TopKLogits>, Tensor<f64>)>;
}

impl<R: Read + Seek> TeacherSource for CacheReader<R> {
    fn header(&self) -> &CacheHeader {
        CacheReader::header(self)
    }

    fn num_sequences(&self) -> usize {
        CacheReader::num_sequences(self)
    }

    fn sequence_len(&self, seq: usize) -> Result<usize> {
        CacheReader::sequence_len(self, seq)
    }

    fn targets(&mut self, seq: usize) -> Result<(Vec<TopKLogits>, Tensor<f64>)> {
        self.sequence_targets(seq)
    }
}

/// Independent seed for one random stream of a run.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_REGRESSOR: u64 = 1;
pub const STREAM_DATA: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub nll: Option<f64>,
    pub kl: Option<f64>,
    pub emb: Option<f64>,
    pub cumulative_flops: f64,
    pub eval_log_ppl: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub struct RunOutput<T> {
    pub model: TransformerModel<T>,
    pub metrics: Vec<MetricRow>,
    pub realized_flops: f64,
    /// Student right after HLDF hint training.
    pub after_hint_training: Option<TransformerModel<T>>,
    pub final_eval: Option<f64>,
}

pub struct RunInputs<'a> {
    pub method: Method,
    pub config: &'a TrainConfig,
    pub plan: &'a FlopsPlan,
    pub train: &'a TokenDataset,
    pub val: Option<&'a TokenDataset>,
    pub teacher: Option<&'a mut dyn TeacherSource>,
    pub seed: u64,
}

fn check_inputs(inp: &RunInputs<'_>) -> Result<()> {
    let cfg = inp.config;
    if inp.plan.method != inp.method {
        return Err(Error::Config(format!("plan is for {}, run is {}", inp.plan.method, inp.method)));
    }
    let tps = (cfg.batch_size * cfg.context_length) as u64;
    if inp.plan.tokens_per_step != tps {
        return Err(Error::Config(format!(
            "plan assumes {} tokens per step, config gives {tps}",
            inp.plan.tokens_per_step
        )));
    }
    if inp.train.vocab_size() != cfg.vocab_size || inp.train.context_length() > cfg.context_length {
        return Err(Error::Config("training data does not match the model's vocabulary or context".into()));
    }
    if inp.train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if inp.method.needs_teacher() {
        let t = inp.teacher.as_ref().ok_or_else(|| Error::Cache(format!("{} needs a teacher cache", inp.method)))?;
        let h = t.header();
        if h.vocab_size as usize != cfg.vocab_size {
            return Err(Error::Cache(format!("cache vocabulary {} differs from {}", h.vocab_size, cfg.vocab_size)));
        }
        if h.top_k as usize != cfg.top_k {
            return Err(Error::Cache(format!("cache holds k={}, config asks for {}", h.top_k, cfg.top_k)));
        }
        if cfg.d_teacher != 0 && h.d_teacher as usize != cfg.d_teacher {
            return Err(Error::Cache(format!("cache width {} differs from d_teacher {}", h.d_teacher, cfg.d_teacher)));
        }
        if t.num_sequences() != inp.train.len() {
            return Err(Error::Cache(format!(
                "cache covers {} sequences, training set has {}",
                t.num_sequences(),
                inp.train.len()
            )));
        }
        for (i, s) in inp.train.sequences().iter().enumerate() {
            if t.sequence_len(i)? != s.len() {
                return Err(Error::Cache(format!("cache sequence {i} is misaligned with the training data")));
            }
        }
    }
    Ok(())
}

/// Trains a fresh student as the plan dictates.
pub fn run<T: Real>(mut inp: RunInputs<'_>) -> Result<RunOutput<T>> {
    check_inputs(&inp)?;
    let cfg = inp.config;
    let method = inp.method;
    let mcfg = cfg.model_config();
    let mut model = TransformerModel::<T>::init(mcfg.clone(), stream_seed(inp.seed, STREAM_INIT))?;
    let d_teacher = inp.teacher.as_ref().map(|t| t.header().d_teacher as usize).unwrap_or(cfg.d_teacher);
    let teacher_layer = inp.teacher.as_ref().map(|t| t.header().teacher_layer as usize).unwrap_or(0);
    let dcfg = cfg.distill_config(teacher_layer);
    if method.needs_teacher() {
        dcfg.validate(cfg.vocab_size, usize::MAX, cfg.num_layers)?;
    }
    passes_required(inp.plan.total_steps() * inp.plan.tokens_per_step, inp.train);

    let mut order = EpochIterator::new(inp.train.len(), stream_seed(inp.seed, STREAM_DATA))?;
    let mut metrics = Vec::with_capacity(inp.plan.total_steps() as usize);
    let mut flops_base = 0.0;
    let mut global_step = 0u64;
    let mut after_hint_training = None;
    let eval_every = cfg.eval_every;
    let tps = inp.plan.tokens_per_step;

    for phase_plan in &inp.plan.phases {
        let phase = phase_plan.phase;
        let (kind, peak, reg_kind) = match (method, phase) {
            (Method::Hldf, Phase::HintTraining) => {
                (ScheduleKind::ConstantWithWarmup, cfg.lr_ht.unwrap_or(cfg.lr), Some(cfg.hldf_regressor))
            }
            (Method::Hldc, _) => (ScheduleKind::Wsd, cfg.lr, Some(cfg.hldc_regressor)),
            _ => (ScheduleKind::Wsd, cfg.lr, None),
        };
        let schedule = cfg.schedule(kind, peak, phase_plan.steps);
        if phase_plan.steps > 1 {
            schedule.validate()?;
        }
        let mut regressor = match reg_kind {
            Some(k) => Some(Regressor::<T>::init(
                k,
                cfg.d_emb,
                d_teacher,
                cfg.regressor_expansion,
                stream_seed(inp.seed, STREAM_REGRESSOR),
            )?),
            None => None,
        };
        let mut opt = OptimizerState::new(cfg.adamw(), model.params());
        let mut reg_opt = regressor.as_ref().map(|r| OptimizerState::new(cfg.adamw(), r.params()));
        let trainable = trainable_in(method, phase, dcfg.student_layer, mcfg.tie_embeddings);

        for k in 1..=phase_plan.steps {
            global_step += 1;
            let ids = order.next_batch(cfg.batch_size);
            let mut batch = Vec::with_capacity(ids.len());
            for &i in &ids {
                let (teacher_logits, teacher_hidden) = match inp.teacher.as_deref_mut() {
                    Some(t) if method.needs_teacher() => {
                        let (l, h) = t.targets(i)?;
                        (Some(l), Some(h))
                    }
                    _ => (None, None),
                };
                batch.push(SequenceTargets {
                    tokens: inp.train.sequences()[i].clone(),
                    teacher_logits,
                    teacher_hidden,
                });
            }

            let mut tape = Tape::new();
            let p = model.bind(&mut tape, &trainable);
            let rp = regressor.as_ref().map(|r| r.bind(&mut tape));
            let reg_pair = regressor.as_ref().zip(rp.as_ref());
            let parts = batch_loss(&mut tape, method, phase, &model, &p, reg_pair, &batch, &dcfg)?;
            let loss = tape.scalar(parts.total).f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: global_step,
                    what: "loss".into(),
                });
            }
            let scalar = |v: Option<crate::tape::Var>| v.map(|v| tape.scalar(v).f64());
            let (nll, kl, emb) = (scalar(parts.nll), scalar(parts.kl), scalar(parts.emb));
            tape.backward(parts.total)?;
            let grads: Vec<_> = p.vars.iter().map(|&v| tape.take_grad(v)).collect();
            let lr = lr_at(&schedule, k);
            adamw_step(model.params_mut(), &grads, &mut opt, lr)?;
            if let (Some(r), Some(rp), Some(ro)) = (regressor.as_mut(), rp.as_ref(), reg_opt.as_mut()) {
                let rg: Vec<_> = rp.vars.iter().map(|&v| tape.take_grad(v)).collect();
                adamw_step(r.params_mut(), &rg, ro, lr)?;
            }

            let last = global_step == inp.plan.total_steps();
            let eval_now = inp.val.is_some() && (last || (eval_every > 0 && global_step.is_multiple_of(eval_every)));
            let eval_log_ppl = match inp.val {
                Some(val) if eval_now => Some(log_perplexity(&model, val, "val")?.value),
                _ => None,
            };
            metrics.push(MetricRow {
                step: global_step,
                phase,
                lr,
                loss,
                nll,
                kl,
                emb,
                cumulative_flops: flops_base + (k * tps) as f64 * phase_plan.per_token_cost,
                eval_log_ppl,
            });
        }
        flops_base += phase_plan.flops();
        if phase == Phase::HintTraining {
            after_hint_training = Some(model.clone());
        }
        if let Some(r) = regressor.take() {
            log::debug!("discarding {:?} regressor after {phase:?}", r.kind());
        }
    }
    let final_eval = metrics.last().and_then(|m| m.eval_log_ppl);
    Ok(RunOutput {
        model,
        metrics,
        realized_flops: flops_base,
        after_hint_training,
        final_eval,
    })
}

/// Mean of the first and last `window` training losses.
pub fn loss_trend(rows: &[MetricRow], window: usize) -> Option<(f64, f64)> {
    if rows.len() < window || window == 0 {
        return None;
    }
    let mean = |r: &[MetricRow]| r.iter().map(|m| m.loss).sum::<f64>() / r.len() as f64;
    Some((mean(&rows[..window]), mean(&rows[rows.len() - window..])))
}
