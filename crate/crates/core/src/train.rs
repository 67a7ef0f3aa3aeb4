//! Minibatch cross-entropy training and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::Stream;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lr = self.adam.learning_rate;
        if !(lr.is_finite() && lr >= 0.0) || !(self.adam.l2_weight >= 0.0) {
            return Err(Error::Config("learning_rate and l2_weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: u64,
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f32>,
}

/// Trains `model` in place. Shuffling is drawn from `stream`, so the result
/// is a pure function of (model, data, cfg, stream).
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, stream: Stream) -> Result<TrainStats> {
    cfg.validate()?;
    let mut opt = AdamState::new(cfg.adam);
    let mut stats = TrainStats::default();
    let mut last_finite = f32::NAN;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0f64;
        let order = batches(data.len(), cfg.batch_size, true, stream.derive("batches"), epoch as u64);
        for idx in &order {
            let batch = data.subset(idx);
            let mut g = Graph::<f32>::new();
            let logits = model.forward(&mut g, &batch.inputs)?;
            let loss = g.cross_entropy(logits, &batch.labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: opt.step_count(),
                    last_finite_loss: last_finite,
                });
            }
            last_finite = value;
            total += f64::from(value) * idx.len() as f64;
            let grads = g.backward(loss)?;
            // Layers outside the executed stack get no gradient and stay put.
            let params = model
                .named_params_mut()
                .into_iter()
                .filter(|(n, _)| grads.params.contains_key(n));
            opt.update(params, &grads.params)?;
        }
        stats.epoch_loss.push((total / data.len().max(1) as f64) as f32);
    }
    stats.steps = opt.step_count();
    if model.named_params().iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::Divergence {
            step: stats.steps,
            last_finite_loss: last_finite,
        });
    }
    Ok(stats)
}

const EVAL_BATCH: usize = 256;

/// Predicted class for every example.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for idx in batches(data.len(), EVAL_BATCH, false, Stream::root(0), 0) {
        let logits = model.logits(&data.subset(&idx).inputs)?;
        out.extend((0..logits.n_rows()).map(|r| argmax(logits.row(r))));
    }
    Ok(out)
}

/// Fraction of correctly classified examples.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Degenerate("cannot evaluate on an empty dataset".into()));
    }
    let pred = predict(model, data)?;
    let correct = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Forward values of `taps` over the whole dataset, concatenated along the
/// batch axis.
pub fn collect_taps(model: &Model, data: &Dataset, taps: &[&str]) -> Result<Vec<Tensor>> {
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); taps.len()];
    for idx in batches(data.len(), EVAL_BATCH, false, Stream::root(0), 0) {
        let out = model.forward_with_taps(&data.subset(&idx).inputs, taps)?;
        for (k, name) in taps.iter().enumerate() {
            parts[k].push(out.taps[*name].clone());
        }
    }
    parts.iter().map(|p| Tensor::concat_rows(p)).collect()
}

fn argmax(row: &[f32]) -> usize {
    // First maximum wins, so ties resolve deterministically.
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
