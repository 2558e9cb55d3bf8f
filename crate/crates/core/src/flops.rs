//! Per-token training cost of each objective and compute-matched step plans.
//!
//! Forward costs per token: full backbone `2N`, half backbone `N`,
//! de-embedding `2·d_S·V`, regressor `2·N_reg`. A backward pass costs twice
//! its forward, so a full training token costs `C_data = 6N + 6·d_S·V`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{regressor_param_count, RegressorKind};
use crate::objectives::{Method, Phase};

/// Tokens per backbone parameter for one Chinchilla-optimal run.
pub const TOKENS_PER_PARAM: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Backbone parameters N (no embedding or de-embedding tables).
    pub backbone_params: f64,
    pub d_student: f64,
    pub d_teacher: f64,
    pub vocab_size: f64,
    pub regressor_params: f64,
    /// Teacher FLOPs per token; zero when logits come from a cache.
    pub teacher_cost: f64,
}

impl CostModel {
    pub fn c_data(&self) -> f64 {
        6.0 * self.backbone_params + 6.0 * self.d_student * self.vocab_size
    }

    pub fn c_kd(&self) -> f64 {
        self.c_data() + self.teacher_cost
    }

    pub fn c_ht(&self) -> f64 {
        3.0 * self.backbone_params + 6.0 * self.regressor_params + self.teacher_cost / 2.0
    }

    pub fn c_hldc(&self) -> f64 {
        self.c_kd() + 6.0 * self.regressor_params
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            self.backbone_params,
            self.d_student,
            self.d_teacher,
            self.vocab_size,
            self.regressor_params,
            self.teacher_cost,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("cost model fields must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Training FLOPs per token. HLDF must name its phase; the other methods
/// accept `None` or [`Phase::Main`].
pub fn cost_per_token(method: Method, cm: &CostModel, phase: Option<Phase>) -> Result<f64> {
    cm.validate()?;
    match (method, phase) {
        (Method::Hldf, None) => Err(Error::Config("HLDF cost needs a phase".into())),
        (Method::Hldf, Some(Phase::HintTraining)) => Ok(cm.c_ht()),
        (Method::Hldf, Some(Phase::Main)) => Ok(cm.c_kd()),
        (m, Some(Phase::HintTraining)) => Err(Error::Config(format!("{m} has no hint-training phase"))),
        (Method::Nll, _) => Ok(cm.c_data()),
        (Method::Kd, _) => Ok(cm.c_kd()),
        (Method::Hldc, _) => Ok(cm.c_hldc()),
    }
}

/// Tokens in `k` overtraining units.
pub fn ot_tokens(k: f64, cm: &CostModel) -> f64 {
    k * TOKENS_PER_PARAM * cm.backbone_params
}

/// FLOPs of `k` overtraining units: `k · 20N · C_data`.
pub fn ot_budget(k: f64, cm: &CostModel) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::Budget(format!("overtraining factor must be positive, got {k}")));
    }
    cm.validate()?;
    Ok(ot_tokens(k, cm) * cm.c_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub phase: Phase,
    pub per_token_cost: f64,
    pub steps: u64,
    pub tokens: u64,
}

impl PhasePlan {
    pub fn flops(&self) -> f64 {
        self.tokens as f64 * self.per_token_cost
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsPlan {
    pub method: Method,
    pub cost_model: CostModel,
    pub total_budget_flops: f64,
    pub ot_units: f64,
    pub tokens_per_step: u64,
    pub phase1_fraction: f64,
    pub phases: Vec<PhasePlan>,
    /// Budget left over after flooring to whole steps.
    pub forfeited_flops: f64,
}

impl FlopsPlan {
    pub fn realized_flops(&self) -> f64 {
        self.phases.iter().map(PhasePlan::flops).sum()
    }

    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn phase(&self, phase: Phase) -> Option<&PhasePlan> {
        self.phases.iter().find(|p| p.phase == phase)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn phase_plan(phase: Phase, per_token_cost: f64, budget: f64, tokens_per_step: u64) -> Result<PhasePlan> {
    let step_cost = per_token_cost * tokens_per_step as f64;
    let steps = (budget / step_cost).floor();
    if !(steps >= 1.0) {
        return Err(Error::Budget(format!(
            "{budget:.4e} FLOPs cannot pay for one {phase:?} step of {step_cost:.4e}"
        )));
    }
    let steps = steps as u64;
    Ok(PhasePlan {
        phase,
        per_token_cost,
        steps,
        tokens: steps * tokens_per_step,
    })
}

/// Splits `budget` into whole training steps. HLDF spends `p1·budget` on
/// hint training and the remainder on KD; `p1 = 0` collapses to the KD plan.
pub fn plan(method: Method, cm: &CostModel, budget: f64, tokens_per_step: u64, p1: f64) -> Result<FlopsPlan> {
    cm.validate()?;
    if tokens_per_step == 0 {
        return Err(Error::Config("tokens_per_step must be positive".into()));
    }
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(Error::Budget(format!("budget must be positive, got {budget}")));
    }
    let p1 = if method == Method::Hldf { p1 } else { 0.0 };
    if !(0.0..1.0).contains(&p1) {
        return Err(Error::Config(format!("phase-1 fraction {p1} outside [0, 1)")));
    }
    let tps = tokens_per_step;
    let phases = if method == Method::Hldf && p1 > 0.0 {
        let first = phase_plan(Phase::HintTraining, cm.c_ht(), p1 * budget, tps)?;
        let second = phase_plan(Phase::Main, cm.c_kd(), budget - first.flops(), tps)?;
        vec![first, second]
    } else {
        let cost = cost_per_token(method, cm, Some(Phase::Main))?;
        vec![phase_plan(Phase::Main, cost, budget, tps)?]
    };
    let c_data = cm.c_data();
    let mut plan = FlopsPlan {
        method,
        cost_model: *cm,
        total_budget_flops: budget,
        ot_units: budget / (TOKENS_PER_PARAM * cm.backbone_params * c_data),
        tokens_per_step: tps,
        phase1_fraction: p1,
        phases,
        forfeited_flops: 0.0,
    };
    plan.forfeited_flops = budget - plan.realized_flops();
    if plan.forfeited_flops > 0.01 * budget {
        log::warn!(
            "{method} plan forfeits {:.2}% of its budget to step rounding",
            100.0 * plan.forfeited_flops / budget
        );
    }
    Ok(plan)
}

/// Architecture numbers needed to price a run, as stored in a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsConfig {
    pub backbone_params: u64,
    pub d_student: usize,
    pub d_teacher: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub teacher_cost: f64,
    #[serde(default = "default_hldc_regressor")]
    pub hldc_regressor: RegressorKind,
    #[serde(default = "default_hldf_regressor")]
    pub hldf_regressor: RegressorKind,
    #[serde(default = "default_expansion")]
    pub regressor_expansion: usize,
    pub batch_size: usize,
    pub context_length: usize,
}

fn default_hldc_regressor() -> RegressorKind {
    RegressorKind::Linear
}

fn default_hldf_regressor() -> RegressorKind {
    RegressorKind::Mlp
}

fn default_expansion() -> usize {
    4
}

impl FlopsConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn regressor_kind(&self, method: Method) -> Option<RegressorKind> {
        match method {
            Method::Hldc => Some(self.hldc_regressor),
            Method::Hldf => Some(self.hldf_regressor),
            Method::Nll | Method::Kd => None,
        }
    }

    /// Cost model with the regressor size `method` trains.
    pub fn cost_model(&self, method: Method) -> CostModel {
        let n_reg = self
            .regressor_kind(method)
            .map(|k| regressor_param_count(k, self.d_student, self.d_teacher, self.regressor_expansion))
            .unwrap_or(0);
        CostModel {
            backbone_params: self.backbone_params as f64,
            d_student: self.d_student as f64,
            d_teacher: self.d_teacher as f64,
            vocab_size: self.vocab_size as f64,
            regressor_params: n_reg as f64,
            teacher_cost: self.teacher_cost,
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.context_length) as u64
    }

    /// Plan for `method` at `ot` overtraining units. The budget is always
    /// priced with `C_data`, so every method gets the same FLOPs.
    pub fn plan(&self, method: Method, ot: f64, p1: f64) -> Result<FlopsPlan> {
        let cm = self.cost_model(method);
        let budget = ot_budget(ot, &cm)?;
        plan(method, &cm, budget, self.tokens_per_step(), p1)
    }
}
