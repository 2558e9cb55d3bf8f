//! Training objectives.
//!
//! * `nll_loss`: mean next-token negative log-likelihood of one sequence.
//! * `kl_topk`: `τ²/n · Σ_i KL(p_T,i ‖ p_S,i)` against truncated teacher logits.
//! * `kd_loss`: `(1-α)·nll + α·kl`.
//! * `normalized_mse` / `hint_loss`: row-normalized MSE between teacher
//!   activations and regressed student activations.
//! * `hldc_loss`: `β·nll + α·kl + γ·emb`.
//!
//! Teacher top-k distributions are renormalized over the retained entries.
//! The student side is the full-vocabulary distribution gathered at the
//! teacher's indices, unless `renormalize_student` is set.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundParams, ParamRole, Regressor, TransformerModel};
use crate::tape::{Tape, Var};
use crate::tensor::{log_softmax_row, softmax_row, Real, Tensor};

/// Training objective families being compared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "NLL")]
    Nll,
    #[serde(rename = "KD")]
    Kd,
    #[serde(rename = "HLDC")]
    Hldc,
    #[serde(rename = "HLDF")]
    Hldf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Nll, Method::Kd, Method::Hldc, Method::Hldf];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Nll => "NLL",
            Method::Kd => "KD",
            Method::Hldc => "HLDC",
            Method::Hldf => "HLDF",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Method::Nll
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nll" => Ok(Method::Nll),
            "kd" => Ok(Method::Kd),
            "hldc" => Ok(Method::Hldc),
            "hldf" => Ok(Method::Hldf),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Training phase; only HLDF has a hint-training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    HintTraining,
    Main,
}

/// Loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub alpha: f64,
    /// Weight of the NLL term in the joint objective; `1 - alpha` when unset.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub gamma: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub teacher_layer: usize,
    pub student_layer: usize,
    #[serde(default)]
    pub phase1_fraction: f64,
    #[serde(default)]
    pub renormalize_student: bool,
}

impl DistillConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(1.0 - self.alpha)
    }

    pub fn validate(&self, teacher_vocab: usize, teacher_layers: usize, student_layers: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.beta() >= 0.0) {
            return fail(format!("beta must be nonnegative, got {}", self.beta()));
        }
        if !(self.gamma >= 0.0) {
            return fail(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.top_k == 0 || self.top_k > teacher_vocab {
            return fail(format!("top_k {} must lie in 1..={teacher_vocab}", self.top_k));
        }
        if self.teacher_layer > teacher_layers {
            return fail(format!("teacher layer {} exceeds {teacher_layers} layers", self.teacher_layer));
        }
        if self.student_layer == 0 || self.student_layer > student_layers {
            return fail(format!("student layer {} must lie in 1..={student_layers}", self.student_layer));
        }
        if !(0.0..1.0).contains(&self.phase1_fraction) {
            return fail(format!("phase-1 fraction must lie in [0, 1), got {}", self.phase1_fraction));
        }
        Ok(())
    }
}

/// Largest teacher logits at one position, sorted descending.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKLogits {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl TopKLogits {
    /// Top `k` of a logit row; ties go to the lower token id.
    pub fn from_logits<T: Real>(row: &[T], k: usize) -> Self {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order.truncate(k);
        TopKLogits {
            indices: order.iter().map(|&i| i as u32).collect(),
            values: order.iter().map(|&i| row[i].f64()).collect(),
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.indices.len() != self.values.len() || self.indices.is_empty() {
            return Err(Error::Config("top-k indices and values must be nonempty and of equal length".into()));
        }
        let mut seen = HashSet::with_capacity(self.indices.len());
        for &i in &self.indices {
            if i as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: i, vocab });
            }
            if !seen.insert(i) {
                return Err(Error::Config(format!("duplicate top-k index {i}")));
            }
        }
        Ok(())
    }

    /// Teacher distribution `softmax(values / τ)` over the retained entries.
    pub fn probabilities(&self, temperature: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.values.len()];
        softmax_row(&self.values, temperature, &mut p);
        p
    }

    pub fn log_probabilities(&self, temperature: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.values.len()];
        log_softmax_row(&self.values, temperature, &mut p);
        p
    }
}

fn leading_rows<T: Real>(tape: &mut Tape<T>, x: Var, n: usize) -> Result<Var> {
    if tape.value(x).rows() == n {
        Ok(x)
    } else {
        Ok(tape.select_rows(x, &(0..n).collect::<Vec<_>>())?)
    }
}

/// Mean NLL of `tokens[1..]` under the logits of `tokens[..len-1]`.
///
/// `logits` must have at least `tokens.len()` rows.
pub fn nll_loss<T: Real>(tape: &mut Tape<T>, logits: Var, tokens: &[u32]) -> Result<Var> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::Data(format!("NLL needs at least 2 tokens, got {n}")));
    }
    if tape.value(logits).rows() < n {
        return Err(Error::Data("fewer logit rows than tokens".into()));
    }
    let rows = leading_rows(tape, logits, n - 1)?;
    let logp = tape.log_softmax(rows, T::one())?;
    let targets: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let picked = tape.gather_cols(logp, &targets)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}

/// `τ²/n · Σ_i KL(teacher_i ‖ student_i)` over the first `teacher.len()` positions.
pub fn kl_topk<T: Real>(
    tape: &mut Tape<T>,
    teacher: &[TopKLogits],
    student_logits: Var,
    temperature: f64,
    renormalize_student: bool,
) -> Result<Var> {
    let n = teacher.len();
    if n == 0 {
        return Err(Error::Data("no teacher positions".into()));
    }
    if !(temperature > 0.0) {
        return Err(crate::tensor::TensorError::NonPositiveTemperature(temperature).into());
    }
    let vocab = tape.value(student_logits).cols();
    let k = teacher[0].indices.len();
    let mut cols = Vec::with_capacity(n * k);
    let mut p = Vec::with_capacity(n * k);
    let mut logp = Vec::with_capacity(n * k);
    for t in teacher {
        t.validate(vocab)?;
        if t.indices.len() != k {
            return Err(Error::Config("teacher positions disagree on k".into()));
        }
        cols.extend(t.indices.iter().map(|&i| i as usize));
        p.extend(t.probabilities(temperature).into_iter().map(T::of));
        logp.extend(t.log_probabilities(temperature).into_iter().map(T::of));
    }
    let rows = leading_rows(tape, student_logits, n)?;
    let student_logp = tape.log_softmax(rows, T::of(temperature))?;
    let mut gathered = tape.gather_cols(student_logp, &cols)?;
    if renormalize_student {
        gathered = tape.log_softmax(gathered, T::one())?;
    }
    let p = tape.constant(Tensor::new(vec![n, k], p)?);
    let logp = tape.constant(Tensor::new(vec![n, k], logp)?);
    let diff = tape.sub(logp, gathered)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, T::of(temperature * temperature / n as f64)))
}

/// `Σ w_i · v_i`, accumulated left to right.
fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let term = tape.scale(v, T::of(w));
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Config("empty weighted sum".into()))
}

/// `(1-α)·nll + α·kl`.
pub fn combine_kd<T: Real>(tape: &mut Tape<T>, nll: Var, kl: Var, alpha: f64) -> Result<Var> {
    weighted_sum(tape, &[(1.0 - alpha, nll), (alpha, kl)])
}

/// `β·nll + α·kl + γ·emb`.
pub fn combine_hldc<T: Real>(tape: &mut Tape<T>, nll: Var, kl: Var, emb: Var, cfg: &DistillConfig) -> Result<Var> {
    weighted_sum(tape, &[(cfg.beta(), nll), (cfg.alpha, kl), (cfg.gamma, emb)])
}

/// Row-normalize both inputs, then the mean squared difference over all entries.
pub fn normalized_mse<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "normalized_mse",
            left: tape.value(a).shape().to_vec(),
            right: tape.value(b).shape().to_vec(),
        }
        .into());
    }
    let na = tape.row_normalize(a)?;
    let nb = tape.row_normalize(b)?;
    let d = tape.sub(na, nb)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Normalized MSE between teacher activations and `reg(student_hidden)`.
pub fn hint_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher_hidden: Var,
    student_hidden: Var,
    reg: &Regressor<T>,
    reg_params: &BoundParams,
) -> Result<Var> {
    let mapped = reg.forward(tape, reg_params, student_hidden)?;
    normalized_mse(tape, teacher_hidden, mapped)
}

/// Everything a loss needs for one training sequence.
#[derive(Clone, Debug)]
pub struct SequenceTargets {
    /// Valid (unpadded) tokens.
    pub tokens: Vec<u32>,
    pub teacher_logits: Option<Vec<TopKLogits>>,
    /// `len × d_T` teacher activations at the matched layer.
    pub teacher_hidden: Option<Tensor<f64>>,
}

/// Scalar pieces of a batch loss, all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub nll: Option<Var>,
    pub kl: Option<Var>,
    pub emb: Option<Var>,
}

/// Which parameters a phase updates.
pub fn trainable_in(method: Method, phase: Phase, student_layer: usize, tied: bool) -> impl Fn(ParamRole) -> bool {
    move |role| match (method, phase) {
        (Method::Hldf, Phase::HintTraining) => match role {
            ParamRole::Layer(l) => l < student_layer,
            ParamRole::PositionEmbedding => true,
            // the tied table doubles as the de-embedding, which stays fixed
            ParamRole::TokenEmbedding => !tied,
            ParamRole::FinalNorm | ParamRole::Unembedding => false,
        },
        _ => true,
    }
}

fn teacher_logits(s: &SequenceTargets) -> Result<&[TopKLogits]> {
    s.teacher_logits
        .as_deref()
        .ok_or_else(|| Error::Cache("batch lacks teacher logits".into()))
}

fn mean_over<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Option<Var>> {
    if vars.is_empty() {
        return Ok(None);
    }
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, T::of(1.0 / vars.len() as f64))))
}

/// Batch loss for `method` in `phase`, averaged over sequences.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    method: Method,
    phase: Phase,
    model: &TransformerModel<T>,
    params: &BoundParams,
    regressor: Option<(&Regressor<T>, &BoundParams)>,
    batch: &[SequenceTargets],
    cfg: &DistillConfig,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut totals = Vec::new();
    let (mut nlls, mut kls, mut embs) = (Vec::new(), Vec::new(), Vec::new());
    let teacher_hidden = |tape: &mut Tape<T>, s: &SequenceTargets| -> Result<Var> {
        let h = s
            .teacher_hidden
            .as_ref()
            .ok_or_else(|| Error::Cache("batch lacks teacher activations".into()))?;
        Ok(tape.constant(h.cast()))
    };
    let reg = || regressor.ok_or_else(|| Error::Config("this objective needs a regressor".into()));
    for seq in batch {
        match (method, phase) {
            (Method::Hldf, Phase::HintTraining) => {
                let states = model.forward_prefix(tape, params, &seq.tokens, cfg.student_layer)?;
                let th = teacher_hidden(tape, seq)?;
                let (r, rp) = reg()?;
                let h = hint_loss(tape, th, states[cfg.student_layer], r, rp)?;
                embs.push(h);
                totals.push(h);
            }
            (Method::Nll, _) => {
                let out = model.forward(tape, params, &seq.tokens)?;
                let nll = nll_loss(tape, out.logits, &seq.tokens)?;
                nlls.push(nll);
                totals.push(nll);
            }
            (Method::Kd | Method::Hldf, _) => {
                let out = model.forward(tape, params, &seq.tokens)?;
                let nll = nll_loss(tape, out.logits, &seq.tokens)?;
                let kl = kl_topk(tape, teacher_logits(seq)?, out.logits, cfg.temperature, cfg.renormalize_student)?;
                nlls.push(nll);
                kls.push(kl);
                totals.push(combine_kd(tape, nll, kl, cfg.alpha)?);
            }
            (Method::Hldc, _) => {
                let out = model.forward(tape, params, &seq.tokens)?;
                let nll = nll_loss(tape, out.logits, &seq.tokens)?;
                let kl = kl_topk(tape, teacher_logits(seq)?, out.logits, cfg.temperature, cfg.renormalize_student)?;
                let th = teacher_hidden(tape, seq)?;
                let (r, rp) = reg()?;
                let emb = hint_loss(tape, th, out.hidden_states[cfg.student_layer], r, rp)?;
                nlls.push(nll);
                kls.push(kl);
                embs.push(emb);
                totals.push(combine_hldc(tape, nll, kl, emb, cfg)?);
            }
        }
    }
    Ok(LossParts {
        total: mean_over(tape, &totals)?.expect("nonempty batch"),
        nll: mean_over(tape, &nlls)?,
        kl: mean_over(tape, &kls)?,
        emb: mean_over(tape, &embs)?,
    })
}
