//! Structural edits on trained models.
//!
//! Every operation takes the model by reference and returns a new one; the
//! input is never mutated. Layer positions are 1-based stack positions.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linearity::LinearApproximator;
use crate::models::{BlockKind, Core, Model};
use crate::rng::Stream;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemoveTarget {
    Mlp,
    SaFf,
    EncoderLayer,
}

/// Machine-readable description of an edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurgeryEdit {
    /// The unedited model.
    Identity,
    Swap { i: usize, j: usize },
    /// `permutation[p - 1]` is the original position of the layer now at `p`.
    Shuffle { k_fixed: usize, fixed: Vec<usize>, permutation: Vec<usize> },
    Remove { target: RemoveTarget, layers: Vec<usize> },
    ReplaceMlp { layers: Vec<usize>, approximators: Vec<String> },
    Repeat { source_layer: usize, n_times: usize, tied: bool },
}

impl SurgeryEdit {
    pub fn kind(&self) -> &'static str {
        match self {
            SurgeryEdit::Identity => "identity",
            SurgeryEdit::Swap { .. } => "swap",
            SurgeryEdit::Shuffle { .. } => "shuffle",
            SurgeryEdit::Remove { .. } => "remove",
            SurgeryEdit::ReplaceMlp { .. } => "replace_mlp",
            SurgeryEdit::Repeat { .. } => "repeat",
        }
    }
}

/// An edit with its evaluation before and after recovery fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryResult {
    pub edit: SurgeryEdit,
    pub baseline: f64,
    pub metrics_direct: f64,
    pub metrics_recovered: Option<f64>,
    pub seed: u64,
}

fn check_position(model: &Model, p: usize) -> Result<()> {
    model.layer_at(p).map(|_| ())
}

/// Gives every stack position its own copy of its layer.
fn untied(model: &Model) -> Model {
    let mut m = model.clone();
    if !m.is_untied() {
        m.layers = m.order.iter().map(|&i| model.layers[i].clone()).collect();
        m.order = (0..m.layers.len()).collect();
    }
    m.canonicalize();
    m
}

/// Whether the layers at positions `i` and `j` can trade places.
pub fn swap_compatible(model: &Model, i: usize, j: usize) -> Result<bool> {
    let (a, b) = (model.layer_at(i)?, model.layer_at(j)?);
    Ok(i == j || (a.is_shape_preserving() && b.is_shape_preserving() && a.signature() == b.signature()))
}

/// Exchanges the layers at positions `i` and `j`, parameters, norms and all.
pub fn swap_layers(model: &Model, i: usize, j: usize) -> Result<Model> {
    if !swap_compatible(model, i, j)? {
        return Err(Error::Compatibility(format!(
            "layers {i} and {j} have different input/output shapes"
        )));
    }
    let mut m = model.clone();
    m.order.swap(i - 1, j - 1);
    m.canonicalize();
    Ok(m)
}

/// Positions whose layers map a shape onto itself and can therefore move.
pub fn movable_positions(model: &Model) -> Vec<usize> {
    let n = model.n_layers();
    let movable: Vec<usize> = (1..=n)
        .filter(|&p| model.layer_at(p).is_ok_and(|l| l.is_shape_preserving()))
        .collect();
    // All movable layers must share one signature to be mutually swappable.
    let sig = movable.first().and_then(|&p| model.layer_at(p).ok()?.signature());
    movable
        .into_iter()
        .filter(|&p| model.layer_at(p).ok().and_then(|l| l.signature()) == sig || sig.is_none())
        .collect()
}

/// Holds `k_fixed` randomly chosen layers in place and permutes the rest
/// uniformly. Layers that cannot move (e.g. a channel-changing first conv)
/// are always held and do not count towards `k_fixed`.
pub fn shuffle_layers(model: &Model, k_fixed: usize, stream: Stream) -> Result<(Model, SurgeryEdit)> {
    let movable = movable_positions(model);
    if k_fixed > movable.len() {
        return Err(Error::Config(format!(
            "k_fixed {k_fixed} exceeds the {} movable layers",
            movable.len()
        )));
    }
    let mut rng = stream.rng();
    let mut pool = movable.clone();
    pool.shuffle(&mut rng);
    let mut fixed = pool[..k_fixed].to_vec();
    fixed.sort_unstable();
    let free: Vec<usize> = movable.iter().copied().filter(|p| !fixed.contains(p)).collect();
    let mut targets = free.clone();
    targets.shuffle(&mut rng);

    let mut permutation: Vec<usize> = (1..=model.n_layers()).collect();
    for (&dst, &src) in free.iter().zip(&targets) {
        permutation[dst - 1] = src;
    }
    let mut m = model.clone();
    m.order = permutation.iter().map(|&src| model.order[src - 1]).collect();
    m.canonicalize();
    Ok((m, SurgeryEdit::Shuffle { k_fixed, fixed, permutation }))
}

/// Removes block cores (kept skip + norm) or whole encoder layers.
pub fn remove_blocks(model: &Model, target: RemoveTarget, layers: &[usize]) -> Result<Model> {
    for &p in layers {
        check_position(model, p)?;
    }
    if layers.is_empty() {
        return Ok(model.clone());
    }
    let mut m = untied(model);
    match target {
        RemoveTarget::EncoderLayer => {
            m.order = (1..=m.n_layers()).filter(|p| !layers.contains(p)).map(|p| m.order[p - 1]).collect();
            m.canonicalize();
        }
        RemoveTarget::Mlp | RemoveTarget::SaFf => {
            let kind = if target == RemoveTarget::Mlp { BlockKind::Mlp } else { BlockKind::SaFf };
            for &p in layers {
                let li = m.order[p - 1];
                let block = m.layers[li]
                    .block_mut(kind)
                    .ok_or_else(|| Error::Lookup(format!("layer {p} has no {} block", kind.tap_name())))?;
                block.core = Core::Zero;
                block.activation = None;
            }
        }
    }
    Ok(m)
}

/// Replaces the feed-forward core of each listed layer with its affine
/// approximator; the approximator becomes an ordinary trainable core.
pub fn replace_mlp_with_approximator(model: &Model, layers: &[usize], approximators: &[LinearApproximator]) -> Result<Model> {
    if layers.len() != approximators.len() {
        return Err(Error::Contract(format!(
            "{} layers but {} approximators",
            layers.len(),
            approximators.len()
        )));
    }
    for &p in layers {
        check_position(model, p)?;
    }
    if layers.is_empty() {
        return Ok(model.clone());
    }
    let mut m = untied(model);
    for (&p, a) in layers.iter().zip(approximators) {
        let li = m.order[p - 1];
        let block = m.layers[li]
            .block_mut(BlockKind::Mlp)
            .ok_or_else(|| Error::Lookup(format!("layer {p} has no ffn block")))?;
        let hidden = match &block.core {
            Core::FeedForward { up, down, .. } => Some((up.d_in(), down.d_out())),
            Core::Affine(l) => Some((l.d_in(), l.d_out())),
            _ => None,
        };
        if hidden.is_some_and(|h| h != (a.d_in(), a.d_out())) || a.d_in() != a.d_out() {
            return Err(Error::Compatibility(format!(
                "approximator {}→{} does not fit layer {p}",
                a.d_in(),
                a.d_out()
            )));
        }
        block.core = Core::Affine(a.to_linear());
        block.activation = None;
    }
    Ok(m)
}

/// Stack of `n_times` copies of the layer at `source`. Tied copies share one
/// parameter set (gradients accumulate across positions); untied copies
/// start equal and train independently.
pub fn repeat_layer(model: &Model, source: usize, n_times: usize, tied: bool) -> Result<Model> {
    let layer = model.layer_at(source)?.clone();
    if n_times == 0 {
        return Err(Error::Config("n_times must be at least 1".into()));
    }
    if n_times > 1 && !layer.is_shape_preserving() {
        return Err(Error::Compatibility(format!("layer {source} changes shape and cannot be stacked")));
    }
    let mut m = model.clone();
    if tied {
        m.layers = vec![layer];
        m.order = vec![0; n_times];
    } else {
        m.layers = vec![layer; n_times];
        m.order = (0..n_times).collect();
    }
    Ok(m)
}

/// Continues training an edited model at `lr_factor ×` the base learning
/// rate and returns it with its accuracy on `eval`.
pub fn recovery_finetune(
    model: &Model,
    finetune: &Dataset,
    eval: &Dataset,
    base: &TrainConfig,
    epochs: usize,
    lr_factor: f32,
    stream: Stream,
) -> Result<(Model, f64)> {
    let mut m = model.clone();
    let mut cfg = base.clone();
    cfg.epochs = epochs;
    cfg.adam.learning_rate *= lr_factor;
    train(&mut m, finetune, &cfg, stream)?;
    let acc = evaluate(&m, eval)?;
    Ok((m, acc))
}
