//! Datasets, deterministic stratified splits and minibatching.

mod idx;
mod synthetic;

pub use idx::{load_mnist_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use synthetic::{
    gen_synthetic_seq, label_from_tokens, read_sseq, synthetic_splits, write_sseq, SeqTaskConfig,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataKind {
    Image { height: usize, width: usize },
    TokenSequence { vocab_size: usize, seq_len: usize },
}

/// Inputs (one row per example) with integer class labels.
///
/// Images are stored as `[n, height·width]` floats in `[0, 1]`; token
/// sequences as `[n, seq_len]` floats holding integer token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub kind: DataKind,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize, kind: DataKind) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Config(format!("label {l} outside 0..{n_classes}")));
        }
        if let DataKind::TokenSequence { vocab_size, .. } = kind {
            if inputs.data().iter().any(|&t| t < 0.0 || t as usize >= vocab_size) {
                return Err(Error::Config(format!("token id outside 0..{vocab_size}")));
            }
        }
        Ok(Dataset { inputs, labels, n_classes, kind })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            kind: self.kind,
        }
    }

    /// First `n` examples (all of them when `n ≥ len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Splits `dataset` into disjoint, label-stratified parts of sizes
/// `round(fraction · n)`. Each part is returned in a seed-determined order.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Config(format!("split fractions must be positive: {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total} > 1")));
    }
    let n = dataset.len();
    let stream = Stream::root(seed).derive("split");

    // Shuffle within each class, then interleave classes by relative rank so
    // every prefix of the ordering is (nearly) class-proportional.
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for class in 0..dataset.n_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
        members.shuffle(&mut stream.derive_idx("class", class as u64).rng());
        let m = members.len() as f64;
        for (rank, i) in members.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / m, class, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let ordered: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (k, &f) in fractions.iter().enumerate() {
        let size = ((f * n as f64).round() as usize).min(n - start);
        let mut idx = ordered[start..start + size].to_vec();
        idx.shuffle(&mut stream.derive_idx("part", k as u64).rng());
        parts.push(dataset.subset(&idx));
        start += size;
    }
    Ok(parts)
}

/// Minibatch index lists covering `0..n` exactly once. With `shuffle`, the
/// order is a function of `(stream, epoch)`; the final batch may be short.
pub fn batches(n: usize, batch_size: usize, shuffle: bool, stream: Stream, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(&mut stream.derive_idx("epoch", epoch).rng());
    }
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
