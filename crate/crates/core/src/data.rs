//! Tokenizers, the packed token container, document splits, epoch batching,
//! and synthetic Markov corpora whose entropy rate is known exactly.
//!
//! Token files:
//!
//! ```text
//! 8 bytes   magic "HLDTOK01"
//! u64 LE    header length H
//! H bytes   JSON header {vocab_size, context_length, pad_id, split,
//!           num_sequences, num_tokens, source_digest}
//! then per sequence: u32 valid length, context_length × u32 ids (pad-filled)
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOKENS_MAGIC: &[u8; 8] = b"HLDTOK01";
pub const BYTE_VOCAB: usize = 257;
pub const BYTE_PAD: u32 = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    /// One id per UTF-8 byte, plus a pad id of 256.
    Byte,
    /// Whitespace-separated words from a fixed list; the pad id follows the words.
    Vocab { words: Vec<String>, index: HashMap<String, u32> },
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("vocabulary entry {i} is not a single word: {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        if words.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        Ok(Tokenizer::Vocab { words, index })
    }

    /// One word per line; blank lines are skipped.
    pub fn from_vocab_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => BYTE_VOCAB,
            Tokenizer::Vocab { words, .. } => words.len() + 1,
        }
    }

    pub fn pad_id(&self) -> u32 {
        (self.vocab_size() - 1) as u32
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Byte => Ok(text.bytes().map(u32::from).collect()),
            Tokenizer::Vocab { index, .. } => text
                .split_whitespace()
                .map(|w| index.get(w).copied().ok_or_else(|| Error::Data(format!("unknown word {w:?}"))))
                .collect(),
        }
    }

    /// Pad ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let pad = self.pad_id();
        let ids = ids.iter().copied().filter(|&i| i != pad);
        match self {
            Tokenizer::Byte => {
                let bytes = ids
                    .map(|i| u8::try_from(i).map_err(|_| Error::Data(format!("id {i} is not a byte"))))
                    .collect::<Result<Vec<u8>>>()?;
                String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
            }
            Tokenizer::Vocab { words, .. } => Ok(ids
                .map(|i| {
                    words
                        .get(i as usize)
                        .map(String::as_str)
                        .ok_or_else(|| Error::Data(format!("id {i} outside the vocabulary")))
                })
                .collect::<Result<Vec<&str>>>()?
                .join(" ")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    vocab_size: usize,
    context_length: usize,
    pad_id: u32,
    split: Split,
    num_sequences: usize,
    num_tokens: u64,
    source_digest: String,
}

/// Sequences of at most `context_length` valid tokens. Padding exists only
/// in the file encoding, never in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    vocab_size: usize,
    context_length: usize,
    pad_id: u32,
    split: Split,
    source_digest: String,
    sequences: Vec<Vec<u32>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the documents, each prefixed by its length.
pub fn documents_digest(docs: &[Vec<u32>]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update((d.len() as u64).to_le_bytes());
        for t in d {
            h.update(t.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

impl TokenDataset {
    pub fn new(
        vocab_size: usize,
        context_length: usize,
        pad_id: u32,
        split: Split,
        sequences: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if context_length < 2 {
            return Err(Error::Config(format!("context length {context_length} below 2")));
        }
        if pad_id as usize >= vocab_size {
            return Err(Error::Config(format!("pad id {pad_id} outside vocabulary {vocab_size}")));
        }
        for s in &sequences {
            if s.is_empty() {
                return Err(Error::Data("empty sequence".into()));
            }
            if s.len() > context_length {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: context_length,
                });
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab_size || t == pad_id) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: vocab_size,
                });
            }
        }
        let source_digest = documents_digest(&sequences);
        Ok(TokenDataset {
            vocab_size,
            context_length,
            pad_id,
            split,
            source_digest,
            sequences,
        })
    }

    /// Cuts every document into consecutive windows of `context_length`;
    /// a trailing window shorter than 2 tokens has no prediction and is dropped.
    pub fn from_documents(
        docs: &[Vec<u32>],
        vocab_size: usize,
        context_length: usize,
        pad_id: u32,
        split: Split,
    ) -> Result<Self> {
        if context_length < 2 {
            return Err(Error::Config(format!("context length {context_length} below 2")));
        }
        let seqs = docs
            .iter()
            .flat_map(|d| d.chunks(context_length))
            .filter(|c| c.len() >= 2)
            .map(<[u32]>::to_vec)
            .collect();
        let mut ds = Self::new(vocab_size, context_length, pad_id, split, seqs)?;
        ds.source_digest = documents_digest(docs);
        Ok(ds)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.len() as u64).sum()
    }

    /// Next-token predictions the dataset offers (`len - 1` per sequence).
    pub fn num_predictions(&self) -> u64 {
        self.sequences.iter().map(|s| s.len() as u64 - 1).sum()
    }

    /// Sequence `i` padded to the context length.
    pub fn padded(&self, i: usize) -> Vec<u32> {
        let mut s = self.sequences[i].clone();
        s.resize(self.context_length, self.pad_id);
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&DatasetHeader {
            vocab_size: self.vocab_size,
            context_length: self.context_length,
            pad_id: self.pad_id,
            split: self.split,
            num_sequences: self.sequences.len(),
            num_tokens: self.num_tokens(),
            source_digest: self.source_digest.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + self.len() * 4 * (self.context_length + 1));
        out.extend_from_slice(TOKENS_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for i in 0..self.len() {
            out.extend_from_slice(&(self.sequences[i].len() as u32).to_le_bytes());
            for t in self.padded(i) {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != TOKENS_MAGIC {
            return Err(Error::Format("not a token dataset (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated dataset header".into()))?;
        let h: DatasetHeader = serde_json::from_slice(&bytes[16..body])?;
        let record = 4 * (h.context_length + 1);
        let payload = &bytes[body..];
        if payload.len() != record * h.num_sequences {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                record * h.num_sequences
            )));
        }
        let words = |c: &[u8]| -> Vec<u32> {
            c.chunks_exact(4).map(|w| u32::from_le_bytes(w.try_into().expect("4 bytes"))).collect()
        };
        let mut sequences = Vec::with_capacity(h.num_sequences);
        for rec in payload.chunks_exact(record) {
            let w = words(rec);
            let len = w[0] as usize;
            if len == 0 || len > h.context_length {
                return Err(Error::Format(format!("sequence length {len} invalid")));
            }
            sequences.push(w[1..=len].to_vec());
        }
        let mut ds = Self::new(h.vocab_size, h.context_length, h.pad_id, h.split, sequences)?;
        ds.source_digest = h.source_digest;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Tokenizes each text as one document and packs it.
pub fn tokenize_corpus(texts: &[String], tokenizer: &Tokenizer, context_length: usize) -> Result<TokenDataset> {
    let docs = texts.iter().map(|t| tokenizer.encode(t)).collect::<Result<Vec<_>>>()?;
    TokenDataset::from_documents(&docs, tokenizer.vocab_size(), context_length, tokenizer.pad_id(), Split::All)
}

/// Fisher-Yates shuffle of `items`.
pub fn shuffle<R: Rng>(rng: &mut R, items: &mut [usize]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Seeded document-level split; returns `(train, val)` document indices,
/// each sorted. `round(val_fraction · n)` documents go to validation.
pub fn split_documents(num_docs: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val fraction {val_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..num_docs).collect();
    shuffle(&mut ChaCha8Rng::seed_from_u64(seed), &mut order);
    let n_val = (val_fraction * num_docs as f64).round() as usize;
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Packs `docs` into disjoint train and validation datasets.
pub fn split_corpus(
    docs: &[Vec<u32>],
    vocab_size: usize,
    context_length: usize,
    pad_id: u32,
    val_fraction: f64,
    seed: u64,
) -> Result<(TokenDataset, TokenDataset)> {
    let (train, val) = split_documents(docs.len(), val_fraction, seed)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| docs[i].clone()).collect::<Vec<_>>();
    Ok((
        TokenDataset::from_documents(&pick(&train), vocab_size, context_length, pad_id, Split::Train)?,
        TokenDataset::from_documents(&pick(&val), vocab_size, context_length, pad_id, Split::Val)?,
    ))
}

/// Reads a text corpus: a directory yields one document per file (sorted by
/// name); a single file is split into documents at blank lines.
pub fn read_texts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files.iter().map(|f| Ok(fs::read_to_string(f)?)).collect()
    } else {
        let text = fs::read_to_string(path)?;
        Ok(text
            .split("\n\n")
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .map(String::from)
            .collect())
    }
}

/// Reshuffled-per-epoch batch order over dataset indices.
#[derive(Clone, Debug)]
pub struct EpochIterator {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl EpochIterator {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot iterate an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        shuffle(&mut rng, &mut order);
        Ok(EpochIterator {
            order,
            cursor: 0,
            epoch: 0,
            rng,
        })
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            shuffle(&mut self.rng, &mut self.order);
            self.cursor = 0;
            self.epoch += 1;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next_index()).collect()
    }
}

/// Passes over the training data a run needs; warns past three.
pub fn passes_required(tokens_needed: u64, dataset: &TokenDataset) -> f64 {
    let passes = tokens_needed as f64 / dataset.num_tokens().max(1) as f64;
    if passes > 3.0 {
        log::warn!("the plan needs {passes:.1} passes over the training data; expect repetition effects");
    }
    passes
}

/// First-order Markov chain over `0..V`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSource {
    vocab_size: usize,
    /// Row-major `V × V`, rows summing to one.
    transition: Vec<f64>,
    stationary: Vec<f64>,
    entropy_rate: f64,
    cumulative: Vec<f64>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Solves `π P = π`, `Σ π = 1` by Gaussian elimination with partial pivoting.
fn stationary_distribution(p: &[f64], v: usize) -> Result<Vec<f64>> {
    // rows of (Pᵀ − I), last row replaced by the normalization constraint
    let mut a = vec![0.0; v * (v + 1)];
    for i in 0..v {
        for j in 0..v {
            a[i * (v + 1) + j] = p[j * v + i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..=v {
        a[(v - 1) * (v + 1) + j] = 1.0;
    }
    let w = v + 1;
    for col in 0..v {
        let pivot = (col..v)
            .max_by(|&x, &y| a[x * w + col].abs().total_cmp(&a[y * w + col].abs()))
            .expect("nonempty");
        if a[pivot * w + col].abs() < 1e-12 {
            return Err(Error::Config("transition matrix has no unique stationary distribution".into()));
        }
        for j in 0..w {
            a.swap(col * w + j, pivot * w + j);
        }
        for r in 0..v {
            if r != col {
                let f = a[r * w + col] / a[col * w + col];
                if f != 0.0 {
                    for j in col..w {
                        a[r * w + j] -= f * a[col * w + j];
                    }
                }
            }
        }
    }
    Ok((0..v).map(|i| a[i * w + v] / a[i * w + i]).collect())
}

impl MarkovSource {
    pub fn new(vocab_size: usize, transition: Vec<f64>) -> Result<Self> {
        if vocab_size < 1 || transition.len() != vocab_size * vocab_size {
            return Err(Error::Config("transition matrix must be V × V".into()));
        }
        for (i, row) in transition.chunks_exact(vocab_size).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (s - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("row {i} is not a distribution (sum {s})")));
            }
        }
        let stationary = stationary_distribution(&transition, vocab_size)?;
        let entropy_rate = transition
            .chunks_exact(vocab_size)
            .zip(&stationary)
            .map(|(row, &pi)| pi * entropy(row))
            .sum();
        let cumulative = transition
            .chunks_exact(vocab_size)
            .flat_map(|row| {
                row.iter().scan(0.0, |acc, &x| {
                    *acc += x;
                    Some(*acc)
                })
            })
            .collect();
        Ok(MarkovSource {
            vocab_size,
            transition,
            stationary,
            entropy_rate,
            cumulative,
        })
    }

    pub fn uniform(v: usize) -> Result<Self> {
        Self::new(v, vec![1.0 / v as f64; v * v])
    }

    /// Deterministic cycle `s → s+1 mod V`.
    pub fn cycle(v: usize) -> Result<Self> {
        let mut t = vec![0.0; v * v];
        for i in 0..v {
            t[i * v + (i + 1) % v] = 1.0;
        }
        Self::new(v, t)
    }

    /// Circulant chain whose rows are shifts of `softmax(-β·j)`, with β
    /// solved by bisection so the entropy rate equals `target` nats.
    pub fn circulant_with_entropy(v: usize, target: f64) -> Result<Self> {
        if v < 2 || !(0.0..(v as f64).ln()).contains(&target) {
            return Err(Error::Config(format!("entropy {target} not attainable with V={v}")));
        }
        let base = |beta: f64| {
            let w: Vec<f64> = (0..v).map(|j| (-beta * j as f64).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect::<Vec<f64>>()
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while entropy(&base(hi)) > target {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if entropy(&base(mid)) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = base(0.5 * (lo + hi));
        let mut t = vec![0.0; v * v];
        for i in 0..v {
            for (j, &qj) in q.iter().enumerate() {
                t[i * v + (i + j) % v] = qj;
            }
        }
        // renormalize rows exactly so they pass the 1e-12 check
        for row in t.chunks_exact_mut(v) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Self::new(v, t)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// `−Σ_s π_s Σ_t P_st ln P_st` in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        self.entropy_rate
    }

    fn draw(cdf: &[f64], u: f64) -> u32 {
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1) as u32
    }

    /// `num_tokens` symbols starting from a stationary draw.
    pub fn sample(&self, num_tokens: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(num_tokens);
        if num_tokens == 0 {
            return out;
        }
        let start: Vec<f64> = self
            .stationary
            .iter()
            .scan(0.0, |acc, &x| {
                *acc += x;
                Some(*acc)
            })
            .collect();
        let mut s = Self::draw(&start, rng.random::<f64>());
        out.push(s);
        let v = self.vocab_size;
        for _ in 1..num_tokens {
            let row = &self.cumulative[s as usize * v..(s as usize + 1) * v];
            s = Self::draw(row, rng.random::<f64>());
            out.push(s);
        }
        out
    }
}

/// Free-standing alias matching the sampling operation's name.
pub fn sample_markov(source: &MarkovSource, num_tokens: usize, seed: u64) -> Vec<u32> {
    source.sample(num_tokens, seed)
}

/// Plug-in estimate of the conditional entropy `H(X_{t+1} | X_t)` in nats.
pub fn empirical_conditional_entropy(tokens: &[u32], vocab_size: usize) -> f64 {
    let mut pair = vec![0u64; vocab_size * vocab_size];
    let mut first = vec![0u64; vocab_size];
    for w in tokens.windows(2) {
        pair[w[0] as usize * vocab_size + w[1] as usize] += 1;
        first[w[0] as usize] += 1;
    }
    let n = tokens.len().saturating_sub(1) as f64;
    let mut h = 0.0;
    for s in 0..vocab_size {
        for t in 0..vocab_size {
            let c = pair[s * vocab_size + t];
            if c > 0 {
                h -= c as f64 / n * (c as f64 / first[s] as f64).ln();
            }
        }
    }
    h
}

/// Synthetic corpus description accepted by `ingest`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub vocab_size: usize,
    /// Target entropy rate in nats; 0 gives the deterministic cycle.
    pub entropy: f64,
    pub num_documents: usize,
    pub document_length: usize,
    pub seed: u64,
}

impl MarkovSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn source(&self) -> Result<MarkovSource> {
        if self.entropy == 0.0 {
            MarkovSource::cycle(self.vocab_size)
        } else if (self.entropy - (self.vocab_size as f64).ln()).abs() < 1e-12 {
            MarkovSource::uniform(self.vocab_size)
        } else {
            MarkovSource::circulant_with_entropy(self.vocab_size, self.entropy)
        }
    }

    /// Independent documents, each sampled with its own derived seed.
    pub fn documents(&self) -> Result<Vec<Vec<u32>>> {
        let src = self.source()?;
        Ok((0..self.num_documents)
            .map(|d| src.sample(self.document_length, self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(d as u64)))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn byte_tokenizer() {
        let t = Tokenizer::Byte;
        assert_eq!(t.encode("ab").unwrap(), vec![97, 98]);
        let s = "héllo, wörld";
        assert_eq!(t.decode(&t.encode(s).unwrap()).unwrap(), s);
        assert_eq!(t.decode(&[104, 105, BYTE_PAD]).unwrap(), "hi");
    }

    #[test]
    fn vocab_tokenizer() {
        let t = Tokenizer::from_words(vec!["the".into(), "cat".into(), "sat".into()]).unwrap();
        assert_eq!(t.vocab_size(), 4);
        assert_eq!(t.pad_id(), 3);
        assert_eq!(t.encode("the cat  sat").unwrap(), vec![0, 1, 2]);
        assert_eq!(t.decode(&[0, 1, 3]).unwrap(), "the cat");
        assert!(matches!(t.encode("the dog"), Err(Error::Data(_))));
        assert!(Tokenizer::from_words(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn identical_texts_pack_identically() {
        let texts = vec!["hello world".to_string(), "hello world".to_string()];
        let ds = tokenize_corpus(&texts, &Tokenizer::Byte, 4).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.sequences()[0..3], ds.sequences()[3..6]);
        assert_eq!(ds.sequences()[2], b"rld".iter().map(|&b| b as u32).collect::<Vec<_>>());
        assert_eq!(ds.padded(2), vec![114, 108, 100, BYTE_PAD]);
    }

    #[test]
    fn single_token_tails_are_dropped() {
        let ds = TokenDataset::from_documents(&[vec![1, 2, 3, 4, 5]], 8, 4, 7, Split::All).unwrap();
        assert_eq!(ds.sequences(), &[vec![1, 2, 3, 4]]);
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let (train, val) = split_documents(100, 0.1, 3).unwrap();
        assert_eq!(val.len(), 10);
        assert_eq!(train.len(), 90);
        let a: HashSet<_> = train.iter().collect();
        assert!(val.iter().all(|v| !a.contains(v)));
        assert_eq!(split_documents(100, 0.1, 3).unwrap(), (train, val));
    }

    #[test]
    fn dataset_round_trip_and_corruption() {
        let ds = TokenDataset::from_documents(&[vec![1, 2, 3], vec![4, 5, 6, 0, 1]], 8, 3, 7, Split::Val).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(TokenDataset::from_bytes(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        bad[0] = b'x';
        assert!(matches!(TokenDataset::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(TokenDataset::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn datasets_reject_bad_tokens() {
        assert!(matches!(
            TokenDataset::new(4, 4, 3, Split::All, vec![vec![0, 3]]),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(TokenDataset::new(4, 4, 3, Split::All, vec![vec![0, 1, 2, 0, 1]]).is_err());
    }

    #[test]
    fn epochs_visit_each_index_once() {
        let mut it = EpochIterator::new(7, 1).unwrap();
        for epoch in 0..3 {
            let mut seen: Vec<usize> = (0..7).map(|_| it.next_index()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..7).collect::<Vec<_>>(), "epoch {epoch}");
        }
        assert_eq!(it.epoch(), 2);
    }

    #[test]
    fn cycle_source_is_periodic_with_zero_entropy() {
        let m = MarkovSource::cycle(5).unwrap();
        assert_eq!(m.entropy_rate(), 0.0);
        for &p in m.stationary() {
            assert!((p - 0.2).abs() < 1e-12);
        }
        let s = m.sample(20, 4);
        assert!(s.windows(2).all(|w| w[1] == (w[0] + 1) % 5));
    }

    #[test]
    fn uniform_source_entropy() {
        let m = MarkovSource::uniform(4).unwrap();
        assert!((m.entropy_rate() - 4f64.ln()).abs() < 1e-12);
        let s = m.sample(100_000, 9);
        let h = empirical_conditional_entropy(&s, 4);
        assert!((h - 4f64.ln()).abs() < 0.02 * 4f64.ln(), "{h}");
        assert_eq!(s, sample_markov(&m, 100_000, 9));
    }

    #[test]
    fn circulant_hits_its_target() {
        let m = MarkovSource::circulant_with_entropy(32, 0.9).unwrap();
        assert!((m.entropy_rate() - 0.9).abs() < 1e-9);
        for &p in m.stationary() {
            assert!((p - 1.0 / 32.0).abs() < 1e-12);
        }
        let h = empirical_conditional_entropy(&m.sample(200_000, 2), 32);
        assert!((h - 0.9).abs() < 0.02, "{h}");
    }

    #[test]
    fn stationary_of_an_asymmetric_chain() {
        // two-state chain: π = (b, a)/(a+b) for flip probabilities a, b
        let (a, b) = (0.3, 0.1);
        let m = MarkovSource::new(2, vec![1.0 - a, a, b, 1.0 - b]).unwrap();
        assert!((m.stationary()[0] - b / (a + b)).abs() < 1e-12);
        assert!(MarkovSource::new(2, vec![0.5, 0.6, 0.5, 0.5]).is_err());
    }
}
