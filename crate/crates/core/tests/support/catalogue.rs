//! Gradient checks for every differentiable op and composite loss, shared by
//! the gradient tests and the acceptance suite.

use hldlab::objectives::{
    batch_loss, combine_hldc, combine_kd, hint_loss, kl_topk, nll_loss, normalized_mse, DistillConfig, Method, Phase,
    SequenceTargets, TopKLogits,
};
use hldlab::{ModelConfig, Regressor, RegressorKind, Tape, Tensor, TransformerModel, Var};
use rand::Rng;

use super::*;

/// `(check name, max relative error)` pairs.
pub type Checks = Vec<(&'static str, f64)>;

fn check<F>(out: &mut Checks, name: &'static str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    out.push((name, gradcheck(inputs, f)));
}

pub fn matmul_sum(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let a = random(&mut r, vec![3, 4], 1.0);
        let b = random(&mut r, vec![4, 5], 1.0);
        check(out, "sum(a·b)", &[a.clone(), b.clone()], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p)
        });
        check(out, "matmul", &[a, b], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            project(t, p, s)
        });
    }
}

pub fn matmul_transposed(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let a = random(&mut r, vec![3, 4], 1.0);
        let b = random(&mut r, vec![6, 4], 1.0);
        check(out, "matmul_t", &[a, b], |t, v| {
            let p = t.matmul_t(v[0], v[1]).unwrap();
            project(t, p, s)
        });
    }
}

pub fn elementwise_ops(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let a = random(&mut r, vec![3, 5], 1.0);
        let b = random(&mut r, vec![3, 5], 1.0);
        let row = random(&mut r, vec![5], 1.0);
        let pos = positive(&mut r, vec![3, 5]);
        check(out, "add", &[a.clone(), b.clone()], |t, v| {
            let o = t.add(v[0], v[1]).unwrap();
            project(t, o, s)
        });
        check(out, "sub", &[a.clone(), b.clone()], |t, v| {
            let o = t.sub(v[0], v[1]).unwrap();
            project(t, o, s)
        });
        check(out, "mul", &[a.clone(), b.clone()], |t, v| {
            let o = t.mul(v[0], v[1]).unwrap();
            project(t, o, s)
        });
        check(out, "mul self", std::slice::from_ref(&a), |t, v| {
            let o = t.mul(v[0], v[0]).unwrap();
            project(t, o, s)
        });
        check(out, "add_row", &[a.clone(), row], |t, v| {
            let o = t.add_row(v[0], v[1]).unwrap();
            project(t, o, s)
        });
        check(out, "scale", std::slice::from_ref(&a), |t, v| {
            let o = t.scale(v[0], -1.7);
            project(t, o, s)
        });
        check(out, "gelu", &[a.clone().scaled(3.0)], |t, v| {
            let o = t.gelu(v[0]);
            project(t, o, s)
        });
        check(out, "log", &[pos], |t, v| {
            let o = t.log(v[0]);
            project(t, o, s)
        });
        check(out, "mean", &[a], |t, v| {
            let o = t.gelu(v[0]);
            t.mean(o)
        });
    }
}

trait Scaled {
    fn scaled(self, f: f64) -> Self;
}

impl Scaled for Tensor<f64> {
    fn scaled(mut self, f: f64) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= f);
        self
    }
}

pub fn indexing_ops(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let table = random(&mut r, vec![6, 3], 1.0);
        let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
        check(out, "gather", std::slice::from_ref(&table), |t, v| {
            let o = t.gather(v[0], &ids).unwrap();
            project(t, o, s)
        });
        let x = random(&mut r, vec![4, 6], 1.0);
        let cols: Vec<usize> = (0..8).map(|_| r.random_range(0..6)).collect();
        check(out, "gather_cols", std::slice::from_ref(&x), |t, v| {
            let o = t.gather_cols(v[0], &cols).unwrap();
            project(t, o, s)
        });
        check(out, "select_rows", &[x], |t, v| {
            let o = t.select_rows(v[0], &[2, 0, 2]).unwrap();
            project(t, o, s)
        });
    }
}

pub fn softmax_family(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let x = random(&mut r, vec![3, 7], 3.0);
        let tau = r.random_range(0.3..3.0);
        check(out, "softmax", std::slice::from_ref(&x), |t, v| {
            let o = t.softmax(v[0], tau).unwrap();
            project(t, o, s)
        });
        check(out, "log_softmax", std::slice::from_ref(&x), |t, v| {
            let o = t.log_softmax(v[0], tau).unwrap();
            project(t, o, s)
        });
        let scores = random(&mut r, vec![5, 5], 2.0);
        check(out, "causal_softmax", &[scores], |t, v| {
            let o = t.causal_softmax(v[0]).unwrap();
            project(t, o, s)
        });
    }
}

pub fn normalization_ops(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let x = random(&mut r, vec![4, 6], 1.0);
        let gain = random(&mut r, vec![6], 1.0);
        check(out, "rms_norm", &[x.clone(), gain], |t, v| {
            let o = t.rms_norm(v[0], v[1], 1e-6).unwrap();
            project(t, o, s)
        });
        check(out, "row_normalize", &[x], |t, v| {
            let o = t.row_normalize(v[0]).unwrap();
            project(t, o, s)
        });
    }
}

pub fn attention(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let q = random(&mut r, vec![5, 8], 1.0);
        let k = random(&mut r, vec![5, 8], 1.0);
        let v = random(&mut r, vec![5, 8], 1.0);
        check(out, "attention", &[q, k, v], |t, x| {
            let o = t.attention(x[0], x[1], x[2], 2).unwrap();
            project(t, o, s)
        });
    }
}

pub fn teacher(r: &mut rand_chacha::ChaCha8Rng, n: usize, vocab: usize, k: usize) -> Vec<TopKLogits> {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..vocab).map(|_| r.random_range(-3.0..3.0)).collect();
            TopKLogits::from_logits(&row, k)
        })
        .collect()
}

pub fn nll_and_kl_losses(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        let logits = random(&mut r, vec![6, 9], 2.0);
        let tokens: Vec<u32> = (0..6).map(|_| r.random_range(0..9)).collect();
        let topk = teacher(&mut r, 6, 9, 4);
        let tau = r.random_range(0.5..2.0);
        check(out, "nll", std::slice::from_ref(&logits), |t, v| nll_loss(t, v[0], &tokens).unwrap());
        for renorm in [false, true] {
            check(out, "kl_topk", std::slice::from_ref(&logits), |t, v| {
                kl_topk(t, &topk, v[0], tau, renorm).unwrap()
            });
        }
        check(out, "kd", &[logits], |t, v| {
            let nll = nll_loss(t, v[0], &tokens).unwrap();
            let kl = kl_topk(t, &topk, v[0], tau, false).unwrap();
            combine_kd(t, nll, kl, 0.9).unwrap()
        });
    }
}

fn distill(student_layer: usize) -> DistillConfig {
    DistillConfig {
        alpha: 0.7,
        beta: None,
        gamma: 0.1,
        temperature: 0.5,
        top_k: 4,
        teacher_layer: 1,
        student_layer,
        phase1_fraction: 0.05,
        renormalize_student: false,
    }
}

pub fn hint_and_hldc_losses(s: u64, out: &mut Checks) {
    {
        let mut r = rng(s);
        for kind in [RegressorKind::Linear, RegressorKind::Mlp] {
            let reg = Regressor::<f64>::init(kind, 4, 6, 2, s).unwrap();
            let student = random(&mut r, vec![5, 4], 1.0);
            let target = random(&mut r, vec![5, 6], 1.0);
            let mut inputs = vec![student.clone(), target.clone()];
            inputs.extend(reg.params().iter().cloned());
            let n_reg = reg.params().len();
            let rebuild = |t: &mut Tape<f64>, v: &[Var]| {
                let rp = hldlab::model::BoundParams {
                    vars: v[2..2 + n_reg].to_vec(),
                };
                hint_loss(t, v[1], v[0], &reg, &rp).unwrap()
            };
            check(out, "hint", &inputs, rebuild);
        }
        let a = random(&mut r, vec![3, 5], 1.0);
        let b = random(&mut r, vec![3, 5], 1.0);
        check(out, "normalized_mse", &[a, b], |t, v| normalized_mse(t, v[0], v[1]).unwrap());

        let logits = random(&mut r, vec![5, 9], 2.0);
        let hidden = random(&mut r, vec![5, 4], 1.0);
        let target = random(&mut r, vec![5, 4], 1.0);
        let tokens: Vec<u32> = (0..5).map(|_| r.random_range(0..9)).collect();
        let topk = teacher(&mut r, 5, 9, 4);
        let cfg = distill(1);
        check(out, "hldc", &[logits, hidden, target], |t, v| {
            let nll = nll_loss(t, v[0], &tokens).unwrap();
            let kl = kl_topk(t, &topk, v[0], cfg.temperature, false).unwrap();
            let emb = normalized_mse(t, v[2], v[1]).unwrap();
            combine_hldc(t, nll, kl, emb, &cfg).unwrap()
        });
    }
}

pub fn small_config(tied: bool) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_emb: 4,
        num_heads: 2,
        d_ff: 8,
        vocab_size: 7,
        context_length: 6,
        rms_eps: 1e-6,
        tie_embeddings: tied,
    }
}

/// Gradcheck of a whole-model batch loss with respect to every trainable
/// model parameter.
fn model_gradcheck(method: Method, phase: Phase, tied: bool, seed: u64) -> f64 {
    let mut r = rng(seed);
    let model = TransformerModel::<f64>::init(small_config(tied), seed).unwrap();
    let reg = Regressor::<f64>::init(RegressorKind::Mlp, 4, 3, 2, seed).unwrap();
    let cfg = distill(1);
    let batch: Vec<SequenceTargets> = (0..2)
        .map(|_| {
            let tokens: Vec<u32> = (0..5).map(|_| r.random_range(0..7)).collect();
            SequenceTargets {
                teacher_logits: Some(teacher(&mut r, 5, 7, 3)),
                teacher_hidden: Some(random(&mut r, vec![5, 3], 1.0)),
                tokens,
            }
        })
        .collect();
    let trainable = hldlab::objectives::trainable_in(method, phase, cfg.student_layer, tied);
    let loss_of = |m: &TransformerModel<f64>, want_grads: bool| {
        let mut tape = Tape::new();
        let p = if want_grads { m.bind(&mut tape, &trainable) } else { m.bind_frozen(&mut tape) };
        let rp = reg.bind(&mut tape);
        let parts = batch_loss(&mut tape, method, phase, m, &p, Some((&reg, &rp)), &batch, &cfg).unwrap();
        let value = tape.scalar(parts.total);
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(parts.total).unwrap();
            for (i, &v) in p.vars.iter().enumerate() {
                grads.push(tape.grad(v).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; m.params()[i].numel()]));
            }
        }
        (value, grads)
    };
    let (_, analytic) = loss_of(&model, true);
    let mut worst = 0.0f64;
    let mut work = model.clone();
    for (i, &role) in model.roles().to_vec().iter().enumerate() {
        let numeric: Vec<f64> = (0..model.params()[i].numel())
            .map(|j| {
                if !trainable(role) {
                    return 0.0;
                }
                let orig = work.params()[i].data()[j];
                work.params_mut()[i].data_mut()[j] = orig + FD_STEP;
                let up = loss_of(&work, false).0;
                work.params_mut()[i].data_mut()[j] = orig - FD_STEP;
                let down = loss_of(&work, false).0;
                work.params_mut()[i].data_mut()[j] = orig;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

pub fn whole_model_objectives(s: u64, out: &mut Checks) {
    let cases = [
        ("model nll tied", Method::Nll, Phase::Main, true),
        ("model nll untied", Method::Nll, Phase::Main, false),
        ("model kd", Method::Kd, Phase::Main, true),
        ("model hldc", Method::Hldc, Phase::Main, false),
        ("model hint untied", Method::Hldf, Phase::HintTraining, false),
        ("model hint tied", Method::Hldf, Phase::HintTraining, true),
    ];
    for (name, method, phase, tied) in cases {
        out.push((name, model_gradcheck(method, phase, tied, s)));
    }
}

/// Every check at one seed.
pub fn all(seed: u64) -> Checks {
    let mut out = Vec::new();
    matmul_sum(seed, &mut out);
    matmul_transposed(seed, &mut out);
    elementwise_ops(seed, &mut out);
    indexing_ops(seed, &mut out);
    softmax_family(seed, &mut out);
    normalization_ops(seed, &mut out);
    attention(seed, &mut out);
    nll_and_kl_losses(seed, &mut out);
    hint_and_hldc_losses(seed, &mut out);
    whole_model_objectives(seed, &mut out);
    out
}
