//! Browser bindings for a few pure hldlab computations.
//!
//! Each export has a plain Rust twin returning `Result<_, String>` so the
//! logic is testable off-wasm; the wrappers only convert errors.

use hldlab::flops::FlopsConfig;
use hldlab::model::RegressorKind;
use hldlab::objectives::{Method, TopKLogits};
use hldlab::trainer::{default_warmup, lr_at, Schedule, ScheduleKind};
use wasm_bindgen::prelude::*;

/// Learning rate for steps `0..=total_steps`. `warmup_steps = 0` picks the
/// default warmup for that length.
pub fn schedule(
    kind: &str,
    peak_lr: f64,
    total_steps: u32,
    warmup_steps: u32,
    decay_fraction: f64,
    floor_ratio: f64,
) -> Result<Vec<f64>, String> {
    let kind = match kind {
        "wsd" => ScheduleKind::Wsd,
        "constant_with_warmup" => ScheduleKind::ConstantWithWarmup,
        other => return Err(format!("unknown schedule {other:?}")),
    };
    let total = total_steps as u64;
    let s = Schedule {
        kind,
        peak_lr,
        warmup_steps: if warmup_steps == 0 { default_warmup(total) } else { warmup_steps as u64 },
        total_steps: total,
        decay_fraction,
        floor_ratio,
    };
    s.validate().map_err(|e| e.to_string())?;
    Ok((0..=total).map(|k| lr_at(&s, k)).collect())
}

/// Per-token cost of KD, HLDC and hint training, each divided by `C_data`.
pub fn ratios(
    backbone_params: f64,
    d_student: u32,
    d_teacher: u32,
    vocab_size: u32,
    hldc_mlp: bool,
    hldf_mlp: bool,
) -> Result<Vec<f64>, String> {
    if !(backbone_params.is_finite() && backbone_params > 0.0) || d_student == 0 || d_teacher == 0 || vocab_size == 0 {
        return Err("sizes must be positive".into());
    }
    let kind = |mlp| if mlp { RegressorKind::Mlp } else { RegressorKind::Linear };
    let cfg = FlopsConfig {
        backbone_params: backbone_params as u64,
        d_student: d_student as usize,
        d_teacher: d_teacher as usize,
        vocab_size: vocab_size as usize,
        teacher_cost: 0.0,
        hldc_regressor: kind(hldc_mlp),
        hldf_regressor: kind(hldf_mlp),
        regressor_expansion: 4,
        batch_size: 1,
        context_length: 1,
    };
    let kd = cfg.cost_model(Method::Kd);
    let hldc = cfg.cost_model(Method::Hldc);
    let hldf = cfg.cost_model(Method::Hldf);
    Ok(vec![kd.c_kd() / kd.c_data(), hldc.c_hldc() / hldc.c_data(), hldf.c_ht() / hldf.c_data()])
}

/// `softmax(logits / τ)` in the original token order.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, String> {
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err("logits must be nonempty and finite".into());
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(format!("temperature must be positive, got {temperature}"));
    }
    let top = TopKLogits::from_logits(logits, logits.len());
    let mut p = vec![0.0; logits.len()];
    for (&i, q) in top.indices.iter().zip(top.probabilities(temperature)) {
        p[i as usize] = q;
    }
    Ok(p)
}

#[wasm_bindgen]
pub fn schedule_curve(
    kind: &str,
    peak_lr: f64,
    total_steps: u32,
    warmup_steps: u32,
    decay_fraction: f64,
    floor_ratio: f64,
) -> Result<Vec<f64>, JsError> {
    schedule(kind, peak_lr, total_steps, warmup_steps, decay_fraction, floor_ratio).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn flops_ratios(
    backbone_params: f64,
    d_student: u32,
    d_teacher: u32,
    vocab_size: u32,
    hldc_mlp: bool,
    hldf_mlp: bool,
) -> Result<Vec<f64>, JsError> {
    ratios(backbone_params, d_student, d_teacher, vocab_size, hldc_mlp, hldf_mlp).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn temperature_softmax(logits: Vec<f64>, temperature: f64) -> Result<Vec<f64>, JsError> {
    softmax(&logits, temperature).map_err(|e| JsError::new(&e))
}
