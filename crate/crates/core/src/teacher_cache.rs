//! Offline teacher artifact: per-token top-k logits plus one hidden-state row.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//!  0       4    magic "TDC1"
//!  4       2    version (u16, currently 1)
//!  6       4    vocab_size V (u32)
//! 10       2    top_k k (u16)
//! 12       4    d_T (u32)
//! 16       2    teacher_layer (u16)
//! 18       1    logit dtype (0 = f32, 1 = f16)
//! 19       1    activation dtype (same codes)
//! 20       4    context_length (u32)
//! 24       8    num_sequences S (u64)
//! 32      32    SHA-256 of the teacher config JSON
//! 64     4·S    per-sequence token counts (u32)
//! then one fixed-stride record per token, sequences back to back:
//!         4·k   indices (u32), descending by logit, ties to the lower id
//!     k·|dt_l|  logit values
//!   d_T·|dt_a|  activation row
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::objectives::TopKLogits;
use crate::tensor::{Real, Tensor};

pub const CACHE_MAGIC: &[u8; 4] = b"TDC1";
pub const CACHE_VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheDtype {
    #[default]
    F32,
    F16,
}

impl CacheDtype {
    pub fn code(self) -> u8 {
        match self {
            CacheDtype::F32 => 0,
            CacheDtype::F16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(CacheDtype::F32),
            1 => Ok(CacheDtype::F16),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            CacheDtype::F32 => 4,
            CacheDtype::F16 => 2,
        }
    }

    fn put(self, v: f64, out: &mut Vec<u8>) {
        match self {
            CacheDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            CacheDtype::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
        }
    }

    fn get(self, b: &[u8]) -> f64 {
        match self {
            CacheDtype::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            CacheDtype::F16 => f16::from_le_bytes([b[0], b[1]]).to_f64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub version: u16,
    pub vocab_size: u32,
    pub top_k: u16,
    pub d_teacher: u32,
    pub teacher_layer: u16,
    pub logit_dtype: CacheDtype,
    pub activation_dtype: CacheDtype,
    pub context_length: u32,
    pub num_sequences: u64,
    pub teacher_config_digest: [u8; 32],
}

impl CacheHeader {
    /// Bytes per token record.
    pub fn record_stride(&self) -> u64 {
        let k = self.top_k as u64;
        k * 4 + k * self.logit_dtype.size() as u64 + self.d_teacher as u64 * self.activation_dtype.size() as u64
    }

    fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k as u32 > self.vocab_size {
            return Err(Error::Format(format!("top_k {} not in 1..={}", self.top_k, self.vocab_size)));
        }
        if self.d_teacher == 0 {
            return Err(Error::Format("zero teacher width".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(CACHE_MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..10].copy_from_slice(&self.vocab_size.to_le_bytes());
        b[10..12].copy_from_slice(&self.top_k.to_le_bytes());
        b[12..16].copy_from_slice(&self.d_teacher.to_le_bytes());
        b[16..18].copy_from_slice(&self.teacher_layer.to_le_bytes());
        b[18] = self.logit_dtype.code();
        b[19] = self.activation_dtype.code();
        b[20..24].copy_from_slice(&self.context_length.to_le_bytes());
        b[24..32].copy_from_slice(&self.num_sequences.to_le_bytes());
        b[32..64].copy_from_slice(&self.teacher_config_digest);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN as usize {
            return Err(Error::Format("truncated cache header".into()));
        }
        if &b[0..4] != CACHE_MAGIC {
            return Err(Error::Format("not a teacher cache (bad magic)".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([b[o], b[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let version = u16_at(4);
        if version != CACHE_VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let h = CacheHeader {
            version,
            vocab_size: u32_at(6),
            top_k: u16_at(10),
            d_teacher: u32_at(12),
            teacher_layer: u16_at(16),
            logit_dtype: CacheDtype::from_code(b[18])?,
            activation_dtype: CacheDtype::from_code(b[19])?,
            context_length: u32_at(20),
            num_sequences: u64::from_le_bytes(b[24..32].try_into().expect("8 bytes")),
            teacher_config_digest: b[32..64].try_into().expect("32 bytes"),
        };
        h.validate()?;
        Ok(h)
    }
}

/// SHA-256 of the config's JSON serialization.
pub fn config_digest(config: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).into()
}

/// One token's cached teacher targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub logits: TopKLogits,
    pub activation: Vec<f64>,
}

/// Streams records into a cache whose sequence lengths are known upfront.
pub struct CacheWriter<W: Write> {
    out: W,
    header: CacheHeader,
    remaining: u64,
    buf: Vec<u8>,
}

impl<W: Write> CacheWriter<W> {
    pub fn new(mut out: W, header: CacheHeader, lengths: &[u32]) -> Result<Self> {
        header.validate()?;
        if lengths.len() as u64 != header.num_sequences {
            return Err(Error::Cache("length table disagrees with num_sequences".into()));
        }
        out.write_all(&header.to_bytes())?;
        for &l in lengths {
            out.write_all(&l.to_le_bytes())?;
        }
        let remaining = lengths.iter().map(|&l| l as u64).sum();
        Ok(CacheWriter {
            out,
            header,
            remaining,
            buf: Vec::new(),
        })
    }

    pub fn write_record(&mut self, logits: &TopKLogits, activation: &[f64]) -> Result<()> {
        if self.remaining == 0 {
            return Err(Error::Cache("more records than the length table declares".into()));
        }
        if logits.indices.len() != self.header.top_k as usize || logits.values.len() != logits.indices.len() {
            return Err(Error::Cache(format!("record does not hold k={} entries", self.header.top_k)));
        }
        logits.validate(self.header.vocab_size as usize)?;
        if activation.len() != self.header.d_teacher as usize {
            return Err(Error::Cache(format!(
                "activation width {} differs from d_T={}",
                activation.len(),
                self.header.d_teacher
            )));
        }
        self.buf.clear();
        for &i in &logits.indices {
            self.buf.extend_from_slice(&i.to_le_bytes());
        }
        for &v in &logits.values {
            self.header.logit_dtype.put(v, &mut self.buf);
        }
        for &v in activation {
            self.header.activation_dtype.put(v, &mut self.buf);
        }
        self.out.write_all(&self.buf)?;
        self.remaining -= 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<CacheHeader> {
        if self.remaining != 0 {
            return Err(Error::Cache(format!("{} records missing", self.remaining)));
        }
        self.out.flush()?;
        Ok(self.header)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheOptions {
    pub layer: usize,
    pub top_k: usize,
    pub logit_dtype: CacheDtype,
    pub activation_dtype: CacheDtype,
}

/// Runs `teacher` over every sequence and writes the cache to `out`.
pub fn write_teacher_cache<T: Real, W: Write>(
    teacher: &TransformerModel<T>,
    corpus: &[Vec<u32>],
    opts: CacheOptions,
    out: W,
) -> Result<CacheHeader> {
    let cfg = teacher.config();
    if opts.layer >= cfg.num_layers {
        return Err(Error::Range(format!("layer {} outside 0..{}", opts.layer, cfg.num_layers)));
    }
    if opts.top_k == 0 || opts.top_k > cfg.vocab_size || opts.top_k > u16::MAX as usize {
        return Err(Error::Range(format!("top_k {} outside 1..={}", opts.top_k, cfg.vocab_size)));
    }
    let header = CacheHeader {
        version: CACHE_VERSION,
        vocab_size: cfg.vocab_size as u32,
        top_k: opts.top_k as u16,
        d_teacher: cfg.d_emb as u32,
        teacher_layer: opts.layer as u16,
        logit_dtype: opts.logit_dtype,
        activation_dtype: opts.activation_dtype,
        context_length: cfg.context_length as u32,
        num_sequences: corpus.len() as u64,
        teacher_config_digest: config_digest(cfg),
    };
    let lengths: Vec<u32> = corpus.iter().map(|s| s.len() as u32).collect();
    let mut w = CacheWriter::new(out, header, &lengths)?;
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let (logits, hidden) = teacher.infer(seq)?;
        let act = &hidden[opts.layer];
        for pos in 0..seq.len() {
            let top = TopKLogits::from_logits(logits.row(pos), opts.top_k);
            let row: Vec<f64> = act.row(pos).iter().map(|v| v.f64()).collect();
            w.write_record(&top, &row)?;
        }
    }
    w.finish()
}

/// File-backed [`write_teacher_cache`].
pub fn cache_teacher<T: Real>(
    teacher: &TransformerModel<T>,
    corpus: &[Vec<u32>],
    opts: CacheOptions,
    path: impl AsRef<Path>,
) -> Result<CacheHeader> {
    let file = File::create(path)?;
    write_teacher_cache(teacher, corpus, opts, BufWriter::new(file))
}

/// Random-access reader; every record is one seek away.
pub struct CacheReader<R> {
    inner: R,
    header: CacheHeader,
    lengths: Vec<u32>,
    /// Index of each sequence's first record.
    starts: Vec<u64>,
    data_offset: u64,
}

impl<R: Read + Seek> CacheReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let total = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut hb = [0u8; HEADER_LEN as usize];
        if total < HEADER_LEN {
            // still report a bad magic as such when the file is tiny
            let mut short = vec![0u8; total as usize];
            inner.read_exact(&mut short)?;
            if short.len() >= 4 && &short[..4] != CACHE_MAGIC {
                return Err(Error::Format("not a teacher cache (bad magic)".into()));
            }
            return Err(Error::Format("truncated cache header".into()));
        }
        inner.read_exact(&mut hb)?;
        let header = CacheHeader::from_bytes(&hb)?;
        let table_bytes = header
            .num_sequences
            .checked_mul(4)
            .filter(|&b| HEADER_LEN + b <= total)
            .ok_or_else(|| Error::Format("truncated length table".into()))?;
        let mut tb = vec![0u8; table_bytes as usize];
        inner.read_exact(&mut tb)?;
        let lengths: Vec<u32> = tb.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut starts = Vec::with_capacity(lengths.len());
        let mut acc = 0u64;
        for &l in &lengths {
            starts.push(acc);
            acc += l as u64;
        }
        let data_offset = HEADER_LEN + table_bytes;
        let expected = data_offset + acc * header.record_stride();
        if total != expected {
            return Err(Error::Format(format!("cache is {total} bytes, header implies {expected}")));
        }
        Ok(CacheReader {
            inner,
            header,
            lengths,
            starts,
            data_offset,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn num_sequences(&self) -> usize {
        self.lengths.len()
    }

    pub fn sequence_len(&self, seq: usize) -> Result<usize> {
        self.lengths
            .get(seq)
            .map(|&l| l as usize)
            .ok_or_else(|| Error::Range(format!("sequence {seq} of {}", self.lengths.len())))
    }

    pub fn total_tokens(&self) -> u64 {
        self.lengths.iter().map(|&l| l as u64).sum()
    }

    fn decode(&self, b: &[u8]) -> Result<CacheRecord> {
        let k = self.header.top_k as usize;
        let (ls, as_) = (self.header.logit_dtype.size(), self.header.activation_dtype.size());
        let indices: Vec<u32> = b[..4 * k].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let vb = &b[4 * k..4 * k + ls * k];
        let values: Vec<f64> = vb.chunks_exact(ls).map(|c| self.header.logit_dtype.get(c)).collect();
        let ab = &b[4 * k + ls * k..];
        let activation = ab.chunks_exact(as_).map(|c| self.header.activation_dtype.get(c)).collect();
        let logits = TopKLogits { indices, values };
        logits
            .validate(self.header.vocab_size as usize)
            .map_err(|e| Error::Format(format!("corrupt record: {e}")))?;
        Ok(CacheRecord { logits, activation })
    }

    fn read_span(&mut self, first: u64, count: usize) -> Result<Vec<u8>> {
        let stride = self.header.record_stride();
        self.inner.seek(SeekFrom::Start(self.data_offset + first * stride))?;
        let mut buf = vec![0u8; count * stride as usize];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn record(&mut self, seq: usize, pos: usize) -> Result<CacheRecord> {
        let len = self.sequence_len(seq)?;
        if pos >= len {
            return Err(Error::Range(format!("position {pos} beyond sequence {seq} of length {len}")));
        }
        let buf = self.read_span(self.starts[seq] + pos as u64, 1)?;
        self.decode(&buf)
    }

    /// Every record of one sequence, read in a single span.
    pub fn sequence(&mut self, seq: usize) -> Result<Vec<CacheRecord>> {
        let len = self.sequence_len(seq)?;
        let buf = self.read_span(self.starts[seq], len)?;
        let stride = self.header.record_stride() as usize;
        if stride == 0 {
            return Ok(Vec::new());
        }
        buf.chunks_exact(stride).map(|c| self.decode(c)).collect()
    }

    /// Top-k targets and an `n × d_T` activation tensor for one sequence.
    pub fn sequence_targets(&mut self, seq: usize) -> Result<(Vec<TopKLogits>, Tensor<f64>)> {
        let recs = self.sequence(seq)?;
        if recs.is_empty() {
            return Err(Error::Range(format!("sequence {seq} is empty")));
        }
        let d = self.header.d_teacher as usize;
        let mut act = Vec::with_capacity(recs.len() * d);
        let mut logits = Vec::with_capacity(recs.len());
        for r in recs {
            act.extend_from_slice(&r.activation);
            logits.push(r.logits);
        }
        let n = logits.len();
        Ok((logits, Tensor::new(vec![n, d], act)?))
    }
}

pub fn open_cache(path: impl AsRef<Path>) -> Result<CacheReader<BufReader<File>>> {
    CacheReader::new(BufReader::new(File::open(path)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    pub vocab_size: usize,
    pub top_k: usize,
    pub d_teacher: usize,
    pub logit_dtype: CacheDtype,
    pub activation_dtype: CacheDtype,
    pub num_sequences: u64,
    pub num_tokens: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageEstimate {
    pub logit_bytes_per_token: u64,
    pub activation_bytes_per_token: u64,
    pub bytes_per_token: u64,
    pub total_bytes: u64,
    /// Bytes per token to store the whole logit row in the logit dtype.
    pub full_vocab_logit_bytes_per_token: u64,
    /// Full-row bytes over top-k bytes; below 1 when k is close to V.
    pub logit_compression_ratio: f64,
}

pub fn storage_estimate(p: StorageParams) -> StorageEstimate {
    let logit = (p.top_k * (4 + p.logit_dtype.size())) as u64;
    let act = (p.d_teacher * p.activation_dtype.size()) as u64;
    let full = (p.vocab_size * p.logit_dtype.size()) as u64;
    StorageEstimate {
        logit_bytes_per_token: logit,
        activation_bytes_per_token: act,
        bytes_per_token: logit + act,
        total_bytes: HEADER_LEN + 4 * p.num_sequences + p.num_tokens * (logit + act),
        full_vocab_logit_bytes_per_token: full,
        logit_compression_ratio: if logit == 0 { f64::INFINITY } else { full as f64 / logit as f64 },
    }
}
