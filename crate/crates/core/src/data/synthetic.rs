//! Three-class marker-order task over token sequences.
//!
//! Each sequence holds two reserved markers `a` and `b` at distinct
//! positions among uniform filler tokens. The label depends only on their
//! relative placement:
//!
//! * `0`: `a` before `b`, gap ≤ `seq_len / 4`
//! * `1`: `a` before `b`, gap > `seq_len / 4`
//! * `2`: `b` before `a`
//!
//! Token counts are identical across classes, so a bag-of-tokens model
//! cannot beat chance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataKind, Dataset};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

const SSEQ_MAGIC: &[u8; 4] = b"SSEQ";
const SSEQ_VERSION: u32 = 1;
pub const N_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqTaskConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_finetune: usize,
    pub n_eval: usize,
    pub marker_a: usize,
    pub marker_b: usize,
    pub seed: u64,
}

impl Default for SeqTaskConfig {
    fn default() -> Self {
        // A fine-tune/validation surrogate at 39,271 / 983 examples would
        // match the original sub-sampled NLI split; these sizes keep runs short.
        SeqTaskConfig {
            vocab_size: 64,
            seq_len: 32,
            n_train: 9_000,
            n_finetune: 3_000,
            n_eval: 1_000,
            marker_a: 1,
            marker_b: 2,
            seed: 0,
        }
    }
}

impl SeqTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::Config(format!("seq_len must be at least 2, got {}", self.seq_len)));
        }
        if self.marker_a == self.marker_b {
            return Err(Error::Config("marker ids must differ".into()));
        }
        if self.marker_a >= self.vocab_size || self.marker_b >= self.vocab_size {
            return Err(Error::Config("marker ids must be below vocab_size".into()));
        }
        if self.vocab_size < 3 || self.vocab_size > usize::from(u16::MAX) + 1 {
            return Err(Error::Config(format!("vocab_size {} out of range", self.vocab_size)));
        }
        Ok(())
    }

    fn gap_threshold(&self) -> usize {
        self.seq_len / 4
    }

    fn label(&self, pos_a: usize, pos_b: usize) -> usize {
        if pos_a < pos_b {
            if pos_b - pos_a <= self.gap_threshold() {
                0
            } else {
                1
            }
        } else {
            2
        }
    }
}

/// Recomputes the label of one sequence from its tokens; `None` when the
/// markers are missing or duplicated.
pub fn label_from_tokens(tokens: &[usize], cfg: &SeqTaskConfig) -> Option<usize> {
    let find = |m: usize| {
        let mut it = tokens.iter().enumerate().filter(|(_, &t)| t == m).map(|(i, _)| i);
        let first = it.next()?;
        it.next().is_none().then_some(first)
    };
    Some(cfg.label(find(cfg.marker_a)?, find(cfg.marker_b)?))
}

fn generate(cfg: &SeqTaskConfig, n: usize, stream: Stream) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    let mut rng = stream.rng();
    let filler: Vec<usize> = (0..cfg.vocab_size)
        .filter(|&t| t != cfg.marker_a && t != cfg.marker_b)
        .collect();
    let quota: Vec<usize> = (0..N_CLASSES).map(|c| n / N_CLASSES + usize::from(c < n % N_CLASSES)).collect();
    let mut filled = vec![0usize; N_CLASSES];
    let mut tokens = Vec::with_capacity(n * cfg.seq_len);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let pos_a = rng.random_range(0..cfg.seq_len);
        let mut pos_b = rng.random_range(0..cfg.seq_len - 1);
        if pos_b >= pos_a {
            pos_b += 1;
        }
        let label = cfg.label(pos_a, pos_b);
        if filled[label] == quota[label] {
            continue;
        }
        filled[label] += 1;
        labels.push(label);
        for p in 0..cfg.seq_len {
            let t = if p == pos_a {
                cfg.marker_a
            } else if p == pos_b {
                cfg.marker_b
            } else {
                filler[rng.random_range(0..filler.len())]
            };
            tokens.push(t as f32);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, cfg.seq_len], tokens)?,
        labels,
        N_CLASSES,
        DataKind::TokenSequence {
            vocab_size: cfg.vocab_size,
            seq_len: cfg.seq_len,
        },
    )
}

/// Class-balanced set of `n_train + n_finetune + n_eval` sequences.
pub fn gen_synthetic_seq(cfg: &SeqTaskConfig) -> Result<Dataset> {
    let n = cfg.n_train + cfg.n_finetune + cfg.n_eval;
    generate(cfg, n, Stream::root(cfg.seed).derive("synthetic"))
}

/// Independently generated, individually balanced train / fine-tune / eval sets.
pub fn synthetic_splits(cfg: &SeqTaskConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let root = Stream::root(cfg.seed).derive("synthetic");
    Ok((
        generate(cfg, cfg.n_train, root.derive("train"))?,
        generate(cfg, cfg.n_finetune, root.derive("finetune"))?,
        generate(cfg, cfg.n_eval, root.derive("eval"))?,
    ))
}

/// SSEQ container: `"SSEQ"`, then little-endian `u32` version, count,
/// sequence length and vocab size; `u16` token ids row-major; `u8` labels.
pub fn write_sseq(dataset: &Dataset) -> Result<Vec<u8>> {
    let DataKind::TokenSequence { vocab_size, seq_len } = dataset.kind else {
        return Err(Error::Config("write_sseq needs a token-sequence dataset".into()));
    };
    let mut out = Vec::with_capacity(20 + dataset.inputs.numel() * 2 + dataset.len());
    out.extend_from_slice(SSEQ_MAGIC);
    for v in [SSEQ_VERSION, dataset.len() as u32, seq_len as u32, vocab_size as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &t in dataset.inputs.data() {
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
    out.extend(dataset.labels.iter().map(|&l| l as u8));
    Ok(out)
}

pub fn read_sseq(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != SSEQ_MAGIC {
        return Err(Error::format(0, "missing SSEQ magic"));
    }
    let word = |i: usize| -> Result<usize> {
        let off = 4 + 4 * i;
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::format(off as u64, "truncated SSEQ header"))
    };
    let version = word(0)?;
    if version != SSEQ_VERSION as usize {
        return Err(Error::format(4, format!("unsupported SSEQ version {version}")));
    }
    let (n, seq_len, vocab_size) = (word(1)?, word(2)?, word(3)?);
    let body = 20;
    let need = body + n * seq_len * 2 + n;
    if bytes.len() != need {
        return Err(Error::format(
            bytes.len().min(need) as u64,
            format!("SSEQ payload is {} bytes, expected {need}", bytes.len()),
        ));
    }
    let tokens: Vec<f32> = bytes[body..body + n * seq_len * 2]
        .chunks_exact(2)
        .map(|c| f32::from(u16::from_le_bytes([c[0], c[1]])))
        .collect();
    let labels = bytes[body + n * seq_len * 2..].iter().map(|&l| usize::from(l)).collect();
    Dataset::new(
        Tensor::new(vec![n, seq_len], tokens)?,
        labels,
        N_CLASSES,
        DataKind::TokenSequence { vocab_size, seq_len },
    )
}
