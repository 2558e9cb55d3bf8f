//! Test-only oracles: central finite differences and seeded random inputs.
#![allow(dead_code)]

pub mod catalogue;

use hldlab::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn positive(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Evaluates `f` with every input registered as a constant.
fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.scalar(out)
}

/// Central-difference gradient of `f` with respect to every input entry.
pub fn numeric_grads<F>(inputs: &[Tensor<f64>], f: &F, h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work, f);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work, f);
            work[i].data_mut()[j] = orig;
            g.push((up - down) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

/// Reverse-mode gradients; inputs with no gradient come back as zeros.
pub fn analytic_grads<F>(inputs: &[Tensor<f64>], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Largest per-input relative error between analytic and numeric gradients.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let a = analytic_grads(inputs, &f);
    let n = numeric_grads(inputs, &f, FD_STEP);
    a.iter().zip(&n).map(|(x, y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry gets its own adjoint.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = random(&mut rng(seed ^ 0xabcdef), shape, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}
