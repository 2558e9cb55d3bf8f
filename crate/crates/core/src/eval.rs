//! Held-out log-perplexity and multiple-choice error rates.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{TokenDataset, Tokenizer};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::{log_softmax_row, Real, Tensor};

/// Anything that maps a token sequence to one logit row per position.
pub trait TokenScorer {
    fn vocab_size(&self) -> usize;
    fn context_length(&self) -> usize;
    /// `len × V` logits, row `i` predicting token `i + 1`.
    fn logits(&self, tokens: &[u32]) -> Result<Tensor<f64>>;
    fn digest(&self) -> String;
}

impl<T: Real> TokenScorer for TransformerModel<T> {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn context_length(&self) -> usize {
        self.config().context_length
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
        Ok(self.infer(tokens)?.0.cast())
    }

    fn digest(&self) -> String {
        model_digest(self)
    }
}

/// SHA-256 over the config JSON and every parameter's bytes.
pub fn model_digest<T: Real>(model: &TransformerModel<T>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).expect("config serializes"));
    for (name, p) in model.names().iter().zip(model.params()) {
        h.update(name.as_bytes());
        for &v in p.data() {
            h.update(v.f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Baseline whose logits are i.i.d. normal draws keyed by the prefix, so a
/// choice's score is independent of whether it is correct.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    pub vocab_size: usize,
    pub context_length: usize,
    pub seed: u64,
}

impl TokenScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn context_length(&self) -> usize {
        self.context_length
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
        let mut data = Vec::with_capacity(tokens.len() * self.vocab_size);
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for &t in tokens {
            h.update(t.to_le_bytes());
            let key: [u8; 32] = h.clone().finalize().into();
            let mut rng = ChaCha8Rng::from_seed(key);
            data.extend((0..self.vocab_size).map(|_| rng.sample::<f64, _>(StandardNormal)));
        }
        Ok(Tensor::new(vec![tokens.len(), self.vocab_size], data)?)
    }

    fn digest(&self) -> String {
        format!("random-{}", self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LogPpl,
    ErrorRate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceNorm {
    TotalNll,
    /// Length-normalized.
    #[default]
    PerTokenNll,
}

impl FromStr for ChoiceNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" | "total_nll" => Ok(ChoiceNorm::TotalNll),
            "pertoken" | "per_token" | "per_token_nll" => Ok(ChoiceNorm::PerTokenNll),
            other => Err(Error::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

impl fmt::Display for ChoiceNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChoiceNorm::TotalNll => "total_nll",
            ChoiceNorm::PerTokenNll => "per_token_nll",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub metric: MetricKind,
    pub value: f64,
    /// Scored tokens for log-perplexity, items for error rates.
    pub count: u64,
    pub model_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChoiceNorm>,
}

/// Summed NLL of every next-token prediction in `tokens` after position
/// `from` (so `from = 0` scores tokens `1..`).
fn continuation_nll(model: &impl TokenScorer, tokens: &[u32], from: usize) -> Result<f64> {
    let logits = model.logits(tokens)?;
    let v = model.vocab_size();
    let mut row = vec![0.0; v];
    let mut total = 0.0;
    for i in from..tokens.len() - 1 {
        log_softmax_row(logits.row(i), 1.0, &mut row);
        total -= row[tokens[i + 1] as usize];
    }
    Ok(total)
}

/// `(Σ NLL, predictions)` over sequences, summed in order.
pub fn nll_sum(model: &impl TokenScorer, sequences: &[Vec<u32>]) -> Result<(f64, u64)> {
    let mut total = 0.0;
    let mut count = 0u64;
    for s in sequences.iter().filter(|s| s.len() >= 2) {
        total += continuation_nll(model, s, 0)?;
        count += s.len() as u64 - 1;
    }
    Ok((total, count))
}

/// Mean per-token NLL in nats over every non-pad prediction.
pub fn log_perplexity(model: &impl TokenScorer, dataset: &TokenDataset, name: &str) -> Result<EvalReport> {
    if dataset.vocab_size() != model.vocab_size() {
        return Err(Error::Config(format!(
            "dataset vocabulary {} differs from the model's {}",
            dataset.vocab_size(),
            model.vocab_size()
        )));
    }
    let (total, count) = nll_sum(model, dataset.sequences())?;
    if count == 0 {
        return Err(Error::Data("dataset has no predictions to score".into()));
    }
    Ok(EvalReport {
        dataset: name.to_string(),
        metric: MetricKind::LogPpl,
        value: total / count as f64,
        count,
        model_digest: model.digest(),
        normalization: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultipleChoiceItem {
    pub context: Vec<u32>,
    pub choices: Vec<Vec<u32>>,
    pub gold: usize,
}

impl MultipleChoiceItem {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::Data("an item needs at least two choices".into()));
        }
        if self.gold >= self.choices.len() {
            return Err(Error::Data(format!("gold {} of {} choices", self.gold, self.choices.len())));
        }
        if self.context.is_empty() {
            return Err(Error::Data("empty context".into()));
        }
        if self.choices.iter().any(Vec::is_empty) {
            return Err(Error::Data("empty choice sequence".into()));
        }
        let mut all = self.context.iter().chain(self.choices.iter().flatten());
        if let Some(&t) = all.find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
        Ok(())
    }
}

/// Index of the smallest score; the first wins ties.
pub fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// NLL of each choice given the context, left-truncating the context to fit.
pub fn choice_scores(model: &impl TokenScorer, item: &MultipleChoiceItem, norm: ChoiceNorm) -> Result<Vec<f64>> {
    item.validate(model.vocab_size())?;
    let ctx = model.context_length();
    item.choices
        .iter()
        .map(|choice| {
            if choice.len() >= ctx {
                return Err(Error::SequenceTooLong {
                    len: choice.len() + 1,
                    max: ctx,
                });
            }
            let keep = (ctx - choice.len()).min(item.context.len());
            let mut seq = item.context[item.context.len() - keep..].to_vec();
            seq.extend_from_slice(choice);
            let nll = continuation_nll(model, &seq, keep - 1)?;
            Ok(match norm {
                ChoiceNorm::TotalNll => nll,
                ChoiceNorm::PerTokenNll => nll / choice.len() as f64,
            })
        })
        .collect()
}

pub fn mc_error_rate(
    model: &impl TokenScorer,
    items: &[MultipleChoiceItem],
    norm: ChoiceNorm,
    name: &str,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Data("no multiple-choice items".into()));
    }
    let mut mistakes = 0u64;
    for item in items {
        if argmin_first(&choice_scores(model, item, norm)?) != item.gold {
            mistakes += 1;
        }
    }
    Ok(EvalReport {
        dataset: name.to_string(),
        metric: MetricKind::ErrorRate,
        value: mistakes as f64 / items.len() as f64,
        count: items.len() as u64,
        model_digest: model.digest(),
        normalization: Some(norm),
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextOrIds {
    Ids(Vec<u32>),
    Text(String),
}

#[derive(Deserialize)]
struct RawItem {
    context: TextOrIds,
    choices: Vec<TextOrIds>,
    gold: usize,
}

/// Reads JSON lines `{"context", "choices", "gold"}` where text fields are
/// either strings (run through `tokenizer`) or arrays of token ids.
pub fn load_mc_jsonl(path: impl AsRef<Path>, tokenizer: &Tokenizer) -> Result<Vec<MultipleChoiceItem>> {
    let text = fs::read_to_string(path)?;
    let conv = |t: TextOrIds| match t {
        TextOrIds::Ids(v) => Ok(v),
        TextOrIds::Text(s) => tokenizer.encode(&s),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let raw: RawItem = serde_json::from_str(l)?;
            Ok(MultipleChoiceItem {
                context: conv(raw.context)?,
                choices: raw.choices.into_iter().map(conv).collect::<Result<_>>()?,
                gold: raw.gold,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ModelConfig;

    /// Deterministic scorer that predicts `next = current + 1 mod V` with
    /// the given confidence.
    struct Successor {
        v: usize,
        logit: f64,
    }

    impl TokenScorer for Successor {
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn context_length(&self) -> usize {
            16
        }
        fn logits(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
            let mut d = vec![0.0; tokens.len() * self.v];
            for (i, &t) in tokens.iter().enumerate() {
                d[i * self.v + (t as usize + 1) % self.v] = self.logit;
            }
            Ok(Tensor::new(vec![tokens.len(), self.v], d)?)
        }
        fn digest(&self) -> String {
            "successor".into()
        }
    }

    fn uniform_model(v: usize) -> TransformerModel<f32> {
        let cfg = ModelConfig {
            num_layers: 1,
            d_emb: 8,
            num_heads: 2,
            d_ff: 16,
            vocab_size: v,
            context_length: 8,
            rms_eps: 1e-6,
            tie_embeddings: false,
        };
        let mut m = TransformerModel::init(cfg, 0).unwrap();
        m.param_mut("unembed").unwrap().data_mut().fill(0.0);
        m
    }

    #[test]
    fn uniform_logits_score_ln_v() {
        let m = uniform_model(256);
        let ds = TokenDataset::new(256, 8, 255, Split::Val, vec![vec![1, 2, 3, 4], vec![9, 8, 7]]).unwrap();
        let r = log_perplexity(&m, &ds, "toy").unwrap();
        assert!((r.value - 256f64.ln()).abs() < 1e-6);
        assert_eq!(r.count, 5);
        let ds = TokenDataset::new(100, 8, 99, Split::Val, vec![vec![1, 2]]).unwrap();
        assert!(log_perplexity(&m, &ds, "toy").is_err());
    }

    #[test]
    fn confident_successor_model_nearly_zero_on_a_cycle() {
        let s = Successor { v: 5, logit: 30.0 };
        let ds = TokenDataset::new(5, 16, 4, Split::Val, vec![vec![0, 1, 2, 3], vec![2, 3]]).unwrap();
        assert!(log_perplexity(&s, &ds, "cycle").unwrap().value < 0.05);
    }

    #[test]
    fn partitioning_does_not_change_the_mean() {
        let r = RandomScorer {
            vocab_size: 7,
            context_length: 16,
            seed: 2,
        };
        let seqs: Vec<Vec<u32>> = (0..9).map(|i| (0..(3 + i % 5)).map(|j| ((i * j) % 6) as u32).collect()).collect();
        let (t, n) = nll_sum(&r, &seqs).unwrap();
        let (a, na) = nll_sum(&r, &seqs[..4]).unwrap();
        let (b, nb) = nll_sum(&r, &seqs[4..]).unwrap();
        assert_eq!(n, na + nb);
        assert!((t / n as f64 - (a + b) / (na + nb) as f64).abs() < 1e-9);
    }

    #[test]
    fn memorizing_model_picks_the_verbatim_continuation() {
        let s = Successor { v: 6, logit: 10.0 };
        let item = MultipleChoiceItem {
            context: vec![0, 1, 2],
            choices: vec![vec![5, 5], vec![3, 4]],
            gold: 1,
        };
        for norm in [ChoiceNorm::TotalNll, ChoiceNorm::PerTokenNll] {
            assert_eq!(mc_error_rate(&s, std::slice::from_ref(&item), norm, "x").unwrap().value, 0.0);
        }
        let wrong = MultipleChoiceItem { gold: 0, ..item };
        assert_eq!(mc_error_rate(&s, &[wrong], ChoiceNorm::TotalNll, "x").unwrap().value, 1.0);
    }

    #[test]
    fn ties_go_to_the_first_choice() {
        assert_eq!(argmin_first(&[1.0, 0.5, 0.5]), 1);
        assert_eq!(argmin_first(&[2.0, 2.0]), 0);
        // a uniform model scores every equal-length choice the same
        let m = uniform_model(10);
        let item = MultipleChoiceItem {
            context: vec![1],
            choices: vec![vec![2], vec![3], vec![4]],
            gold: 0,
        };
        assert_eq!(mc_error_rate(&m, &[item], ChoiceNorm::TotalNll, "x").unwrap().value, 0.0);
    }

    #[test]
    fn per_token_normalization_changes_length_preference() {
        let s = Successor { v: 6, logit: 1.0 };
        // long correct-ish continuation against a short one
        let item = MultipleChoiceItem {
            context: vec![0],
            choices: vec![vec![1, 2, 3, 4], vec![3]],
            gold: 0,
        };
        let total = choice_scores(&s, &item, ChoiceNorm::TotalNll).unwrap();
        let per = choice_scores(&s, &item, ChoiceNorm::PerTokenNll).unwrap();
        assert!((per[0] - total[0] / 4.0).abs() < 1e-12);
        assert_eq!(per[1], total[1]);
    }

    #[test]
    fn malformed_items_are_rejected() {
        let s = Successor { v: 6, logit: 1.0 };
        let empty = MultipleChoiceItem {
            context: vec![0],
            choices: vec![vec![], vec![1]],
            gold: 0,
        };
        assert!(matches!(mc_error_rate(&s, &[empty], ChoiceNorm::TotalNll, "x"), Err(Error::Data(_))));
        assert!(mc_error_rate(&s, &[], ChoiceNorm::TotalNll, "x").is_err());
    }

    #[test]
    fn evaluation_leaves_parameters_untouched() {
        let m = uniform_model(12);
        let before = m.params().to_vec();
        let ds = TokenDataset::new(12, 8, 11, Split::Val, vec![vec![1, 2, 3]]).unwrap();
        log_perplexity(&m, &ds, "x").unwrap();
        assert_eq!(m.params(), &before[..]);
    }

    #[test]
    fn jsonl_accepts_text_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mc.jsonl");
        fs::write(&p, "{\"context\":\"ab\",\"choices\":[\"c\",[100,101]],\"gold\":1}\n\n").unwrap();
        let items = load_mc_jsonl(&p, &Tokenizer::Byte).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].context, vec![97, 98]);
        assert_eq!(items[0].choices, vec![vec![99], vec![100, 101]]);
    }
}
