//! Causal decoder-only transformer with every residual-stream state exposed,
//! plus the regressors that map student hidden states into teacher width.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! a      = attention(rms_norm(h))
//! delta  = a + mlp(rms_norm(h + a))
//! h_next = h + delta
//! ```
//!
//! `hidden_states[0]` is the token plus position embedding, `hidden_states[k]`
//! the stream after block `k`, and the logits come from the final norm
//! followed by the de-embedding projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_emb: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
    #[serde(default = "default_tie")]
    pub tie_embeddings: bool,
}

fn default_rms_eps() -> f64 {
    1e-6
}

fn default_tie() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.d_emb == 0 || self.d_ff == 0 || self.num_heads == 0 {
            return fail(format!("layer count, widths and heads must be positive: {self:?}"));
        }
        if !self.d_emb.is_multiple_of(self.num_heads) {
            return fail(format!("{} heads do not divide d_emb {}", self.num_heads, self.d_emb));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.context_length < 2 {
            return fail(format!("context_length must be at least 2, got {}", self.context_length));
        }
        if !(self.rms_eps > 0.0) {
            return fail(format!("rms_eps must be positive, got {}", self.rms_eps));
        }
        Ok(())
    }

    fn layer_params(&self) -> usize {
        let d = self.d_emb;
        // two norm gains, q/k/v/o, mlp weights and biases
        2 * d + 4 * d * d + d * self.d_ff + self.d_ff + self.d_ff * d + d
    }

    /// Parameters excluding the token, position and de-embedding tables.
    pub fn backbone_param_count(&self) -> usize {
        self.num_layers * self.layer_params() + self.d_emb
    }

    pub fn total_param_count(&self) -> usize {
        let tables = self.vocab_size * self.d_emb + self.context_length * self.d_emb;
        let unembed = if self.tie_embeddings { 0 } else { self.d_emb * self.vocab_size };
        self.backbone_param_count() + tables + unembed
    }
}

/// Index of the hidden state matched by hidden-layer distillation: `floor(D/2)`.
pub fn median_layer_index(config: &ModelConfig) -> usize {
    config.num_layers / 2
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    /// Block index, 0-based; block `i` produces `hidden_states[i + 1]`.
    Layer(usize),
    FinalNorm,
    Unembedding,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    mlp_norm: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    names: Vec<String>,
    roles: Vec<ParamRole>,
    params: Vec<Tensor<T>>,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerSlots>,
    final_norm: usize,
    unembed: Option<usize>,
}

/// Parameters registered on a tape for one step.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `L×V`.
    pub logits: Var,
    /// `D+1` states of shape `L×d_emb`.
    pub hidden_states: Vec<Var>,
    /// Per-block residual update, `hidden_states[k+1] = hidden_states[k] + layer_outputs[k]`.
    pub layer_outputs: Vec<Var>,
}

pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::of(truncated_normal(rng, std))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<T: Real> TransformerModel<T> {
    /// Deterministic random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_emb;
        let std = 1.0 / (d as f64).sqrt();
        let mut b = Builder::default();
        let tok_emb = b.push("tok_emb", ParamRole::TokenEmbedding, random_tensor(&mut rng, vec![config.vocab_size, d], std));
        let pos_emb = b.push("pos_emb", ParamRole::PositionEmbedding, random_tensor(&mut rng, vec![config.context_length, d], std));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let role = ParamRole::Layer(l);
            let mut p = |name: &str, t: Tensor<T>| b.push(&format!("layers.{l}.{name}"), role, t);
            layers.push(LayerSlots {
                attn_norm: p("attn_norm", Tensor::full(vec![d], T::one())),
                wq: p("wq", random_tensor(&mut rng, vec![d, d], std)),
                wk: p("wk", random_tensor(&mut rng, vec![d, d], std)),
                wv: p("wv", random_tensor(&mut rng, vec![d, d], std)),
                wo: p("wo", random_tensor(&mut rng, vec![d, d], std)),
                mlp_norm: p("mlp_norm", Tensor::full(vec![d], T::one())),
                w1: p("w1", random_tensor(&mut rng, vec![d, config.d_ff], std)),
                b1: p("b1", Tensor::zeros(vec![config.d_ff])),
                w2: p("w2", random_tensor(&mut rng, vec![config.d_ff, d], std)),
                b2: p("b2", Tensor::zeros(vec![d])),
            });
        }
        let final_norm = b.push("final_norm", ParamRole::FinalNorm, Tensor::full(vec![d], T::one()));
        let unembed = (!config.tie_embeddings)
            .then(|| b.push("unembed", ParamRole::Unembedding, random_tensor(&mut rng, vec![d, config.vocab_size], std)));
        Ok(TransformerModel {
            config,
            names: b.names,
            roles: b.roles,
            params: b.params,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// Parameter count of all stored tensors.
    pub fn stored_param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| matches!(r, ParamRole::Layer(_) | ParamRole::FinalNorm))
            .map(|(p, _)| p.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            names: self.names.clone(),
            roles: self.roles.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            final_norm: self.final_norm,
            unembed: self.unembed,
        }
    }

    /// Registers every parameter on the tape; `trainable` picks which ones
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamRole) -> bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .zip(&self.roles)
            .map(|(p, &role)| tape.leaf(p.clone(), trainable(role)))
            .collect();
        BoundParams { vars }
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        self.bind(tape, |_| false)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.context_length,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape<T>, p: &BoundParams, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather(p.vars[self.tok_emb], &ids)?;
        let pos = tape.gather(p.vars[self.pos_emb], &positions)?;
        Ok(tape.add(tok, pos)?)
    }

    fn block(&self, tape: &mut Tape<T>, p: &BoundParams, l: usize, h: Var) -> Result<(Var, Var)> {
        let s = &self.layers[l];
        let v = |i: usize| p.vars[i];
        let eps = T::of(self.config.rms_eps);
        let a = tape.rms_norm(h, v(s.attn_norm), eps)?;
        let q = tape.matmul(a, v(s.wq))?;
        let k = tape.matmul(a, v(s.wk))?;
        let vv = tape.matmul(a, v(s.wv))?;
        let att = tape.attention(q, k, vv, self.config.num_heads)?;
        let att = tape.matmul(att, v(s.wo))?;
        let mid = tape.add(h, att)?;
        let m = tape.rms_norm(mid, v(s.mlp_norm), eps)?;
        let up = tape.matmul(m, v(s.w1))?;
        let up = tape.add_row(up, v(s.b1))?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, v(s.w2))?;
        let down = tape.add_row(down, v(s.b2))?;
        let delta = tape.add(att, down)?;
        let next = tape.add(h, delta)?;
        Ok((next, delta))
    }

    /// Runs the first `depth` blocks and returns `hidden_states[0..=depth]`.
    pub fn forward_prefix(&self, tape: &mut Tape<T>, p: &BoundParams, tokens: &[u32], depth: usize) -> Result<Vec<Var>> {
        if depth > self.config.num_layers {
            return Err(Error::Range(format!("depth {depth} exceeds {} layers", self.config.num_layers)));
        }
        let mut h = self.embed(tape, p, tokens)?;
        let mut states = vec![h];
        for l in 0..depth {
            h = self.block(tape, p, l, h)?.0;
            states.push(h);
        }
        Ok(states)
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &BoundParams, tokens: &[u32]) -> Result<ForwardOutput> {
        let mut h = self.embed(tape, p, tokens)?;
        let mut hidden_states = vec![h];
        let mut layer_outputs = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let (next, delta) = self.block(tape, p, l, h)?;
            h = next;
            hidden_states.push(h);
            layer_outputs.push(delta);
        }
        let normed = tape.rms_norm(h, p.vars[self.final_norm], T::of(self.config.rms_eps))?;
        let logits = match self.unembed {
            Some(u) => tape.matmul(normed, p.vars[u])?,
            None => tape.matmul_t(normed, p.vars[self.tok_emb])?,
        };
        Ok(ForwardOutput {
            logits,
            hidden_states,
            layer_outputs,
        })
    }

    /// Tape-free convenience forward returning `(logits, hidden_states)`.
    pub fn infer(&self, tokens: &[u32]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, tokens)?;
        let hidden = out.hidden_states.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(out.logits).clone(), hidden))
    }

    pub(crate) fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let slot = model
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if model.params[slot].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    t.shape(),
                    model.params[slot].shape()
                )));
            }
            model.params[slot] = t;
        }
        Ok(model)
    }
}

#[derive(Default)]
struct Builder<T> {
    names: Vec<String>,
    roles: Vec<ParamRole>,
    params: Vec<Tensor<T>>,
}

impl<T> Builder<T> {
    fn push(&mut self, name: &str, role: ParamRole, t: Tensor<T>) -> usize {
        self.names.push(name.to_string());
        self.roles.push(role);
        self.params.push(t);
        self.params.len() - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Linear,
    Mlp,
}

/// Learned map from student width to teacher width.
#[derive(Clone, Debug)]
pub struct Regressor<T> {
    kind: RegressorKind,
    input_dim: usize,
    hidden_dim: Option<usize>,
    output_dim: usize,
    params: Vec<Tensor<T>>,
}

/// Parameter count of a regressor without building it.
pub fn regressor_param_count(kind: RegressorKind, input_dim: usize, output_dim: usize, expansion: usize) -> usize {
    match kind {
        RegressorKind::Linear => input_dim * output_dim + output_dim,
        RegressorKind::Mlp => {
            let h = expansion * input_dim;
            input_dim * h + h + h * output_dim + output_dim
        }
    }
}

impl<T: Real> Regressor<T> {
    /// `expansion` sets the MLP hidden width as a multiple of `input_dim`;
    /// it is ignored for the linear kind.
    pub fn init(kind: RegressorKind, input_dim: usize, output_dim: usize, expansion: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || (kind == RegressorKind::Mlp && expansion == 0) {
            return Err(Error::Config("regressor dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7e55);
        let (hidden_dim, params) = match kind {
            RegressorKind::Linear => (
                None,
                vec![
                    random_tensor(&mut rng, vec![input_dim, output_dim], 1.0 / (input_dim as f64).sqrt()),
                    Tensor::zeros(vec![output_dim]),
                ],
            ),
            RegressorKind::Mlp => {
                let h = expansion * input_dim;
                (
                    Some(h),
                    vec![
                        random_tensor(&mut rng, vec![input_dim, h], 1.0 / (input_dim as f64).sqrt()),
                        Tensor::zeros(vec![h]),
                        random_tensor(&mut rng, vec![h, output_dim], 1.0 / (h as f64).sqrt()),
                        Tensor::zeros(vec![output_dim]),
                    ],
                )
            }
        };
        Ok(Regressor {
            kind,
            input_dim,
            hidden_dim,
            output_dim,
            params,
        })
    }

    pub fn kind(&self) -> RegressorKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &BoundParams, h: Var) -> Result<Var> {
        let x = tape.matmul(h, p.vars[0])?;
        let x = tape.add_row(x, p.vars[1])?;
        match self.kind {
            RegressorKind::Linear => Ok(x),
            RegressorKind::Mlp => {
                let a = tape.gelu(x);
                let y = tape.matmul(a, p.vars[2])?;
                Ok(tape.add_row(y, p.vars[3])?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_emb: 8,
            num_heads: 2,
            d_ff: 32,
            vocab_size: 16,
            context_length: 8,
            rms_eps: 1e-6,
            tie_embeddings: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerModel::<f32>::init(tiny(), 7).unwrap();
        let b = TransformerModel::<f32>::init(tiny(), 7).unwrap();
        let c = TransformerModel::<f32>::init(tiny(), 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn backbone_count_matches_per_matrix_oracle() {
        // per block: 2 gains (8 each), q/k/v/o (64 each), w1 8x32, b1 32, w2 32x8, b2 8
        let per_block = 2 * 8 + 4 * 64 + 256 + 32 + 256 + 8;
        let expected = 2 * per_block + 8; // + final norm gain
        assert_eq!(expected, 2 * 824 + 8);
        let m = TransformerModel::<f32>::init(tiny(), 1).unwrap();
        assert_eq!(m.backbone_param_count(), expected);
        assert_eq!(tiny().backbone_param_count(), expected);
        assert_eq!(m.stored_param_count(), tiny().total_param_count());
    }

    #[test]
    fn tying_drops_one_table() {
        let mut untied = tiny();
        untied.tie_embeddings = false;
        let a = TransformerModel::<f32>::init(tiny(), 1).unwrap();
        let b = TransformerModel::<f32>::init(untied, 1).unwrap();
        assert_eq!(b.stored_param_count() - a.stored_param_count(), 16 * 8);
        assert_eq!(a.backbone_param_count(), b.backbone_param_count());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.context_length = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn median_layer() {
        let mut c = tiny();
        for (d, m) in [(34, 17), (18, 9), (3, 1), (4, 2), (2, 1)] {
            c.num_layers = d;
            assert_eq!(median_layer_index(&c), m);
        }
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = TransformerModel::<f32>::init(tiny(), 3).unwrap();
        let (logits, hidden) = m.infer(&[5]).unwrap();
        assert_eq!(logits.shape(), &[1, 16]);
        assert_eq!(hidden.len(), 3);
        let (logits, hidden) = m.infer(&[1, 2, 3, 4]).unwrap();
        assert_eq!(logits.shape(), &[4, 16]);
        assert!(hidden.iter().all(|h| h.shape() == [4, 8]));
        assert!(matches!(m.infer(&[16]), Err(Error::TokenOutOfRange { token: 16, .. })));
        assert!(matches!(m.infer(&[0; 9]), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn residual_stream_accumulates_layer_outputs() {
        let m = TransformerModel::<f64>::init(tiny(), 3).unwrap();
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let out = m.forward(&mut tape, &p, &[3, 1, 4, 1, 5]).unwrap();
        for k in 0..2 {
            let h0 = tape.value(out.hidden_states[k]).data();
            let h1 = tape.value(out.hidden_states[k + 1]).data();
            let f = tape.value(out.layer_outputs[k]).data();
            for ((a, b), c) in h0.iter().zip(h1).zip(f) {
                assert!((b - a - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regressor_shapes_and_counts() {
        let mlp = Regressor::<f64>::init(RegressorKind::Mlp, 8, 16, 4, 0).unwrap();
        assert_eq!(mlp.param_count(), (8 * 32 + 32) + (32 * 16 + 16));
        assert_eq!(mlp.param_count(), 816);
        assert_eq!(regressor_param_count(RegressorKind::Mlp, 8, 16, 4), 816);
        let lin = Regressor::<f64>::init(RegressorKind::Linear, 8, 16, 4, 0).unwrap();
        assert_eq!(lin.params().len(), 2);
        assert_eq!(lin.param_count(), regressor_param_count(RegressorKind::Linear, 8, 16, 1));
    }

    #[test]
    fn identity_linear_regressor_passes_input_through() {
        let mut reg = Regressor::<f64>::init(RegressorKind::Linear, 3, 3, 1, 0).unwrap();
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        reg.params_mut()[0] = eye;
        let mut tape = Tape::new();
        let p = reg.bind(&mut tape);
        let x = tape.constant(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let y = reg.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let bad = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(reg.forward(&mut tape, &p, bad).is_err());
    }
}
