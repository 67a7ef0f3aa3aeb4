//! Linearity score, cone size and their normalized combination.
//!
//! A block is probed by fitting an affine map to its (input, core output)
//! pairs with a cosine objective and measuring the mean cosine between true
//! and approximated outputs on held-out rows (γ). Because contextual
//! representations tend to occupy a narrow cone, γ is compared with the
//! expected cosine of two random outputs (the cone size) and rescaled:
//!
//! ```text
//! γ̃ = (γ − cone) / (1 − cone)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{BlockKind, Linear, Model};
use crate::rng::Stream;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};
use crate::train::{collect_taps, TrainConfig};
use crate::data::batches;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `None` when either vector has zero norm.
fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // sqrt(na·nb) rather than sqrt(na)·sqrt(nb): cos(v, v) is then exactly 1.
    Some((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("cosine of {:?} and {:?}", a.shape(), b.shape())));
    }
    cosine(a.data(), b.data()).ok_or_else(|| Error::Degenerate("cosine of a zero-norm vector".into()))
}

/// Mean cosine over `n_pairs` row pairs `(i, j)`, `i ≠ j`, drawn uniformly
/// with replacement across pairs.
pub fn cone_size<R: Rng>(embeddings: &Tensor, n_pairs: usize, rng: &mut R) -> Result<f64> {
    let n = embeddings.n_rows();
    if n < 2 || n_pairs == 0 {
        return Err(Error::Config(format!("cone size needs ≥ 2 rows and ≥ 1 pair, got {n} rows, {n_pairs} pairs")));
    }
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += cosine(embeddings.row(i), embeddings.row(j))
            .ok_or_else(|| Error::Degenerate(format!("zero-norm embedding in pair ({i}, {j})")))?;
    }
    Ok(total / n_pairs as f64)
}

/// `(γ − cone) / (1 − cone)`.
pub fn normalized_linearity(gamma: f64, cone: f64) -> Result<f64> {
    if !(cone < 1.0 - 1e-9) {
        return Err(Error::Degenerate(format!("cone size {cone} leaves no room for normalization")));
    }
    Ok((gamma - cone) / (1.0 - cone))
}

/// Affine stand-in `f*` for a block core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearApproximator {
    pub weight: Tensor,
    pub bias: Tensor,
    pub target_block: String,
    /// Rows used for fitting, after excluding zero-norm targets.
    pub trained_on: usize,
    pub excluded_rows: usize,
}

impl LinearApproximator {
    pub fn identity(d: usize) -> Self {
        let mut weight = Tensor::zeros(&[d, d]);
        for i in 0..d {
            weight.data_mut()[i * d + i] = 1.0;
        }
        LinearApproximator {
            weight,
            bias: Tensor::zeros(&[d]),
            target_block: String::new(),
            trained_on: 0,
            excluded_rows: 0,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let x = g.constant_f32(inputs);
        let w = g.constant_f32(&self.weight);
        let b = g.constant_f32(&self.bias);
        let y = g.linear(x, w, Some(b))?;
        Ok(g.value(y).clone())
    }

    pub fn to_linear(&self) -> Linear {
        Linear {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
        }
    }
}

/// Mean cosine between target and prediction rows, with the count of rows
/// skipped because one side has zero norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowScore {
    pub gamma: f64,
    pub n_rows: usize,
    pub excluded: usize,
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.last_dim();
    t.reshape(&[t.numel() / d, d])
}

pub fn score_rows(pred: &Tensor, target: &Tensor) -> Result<RowScore> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let d = pred.last_dim();
    let mut total = 0.0;
    let mut used = 0;
    let mut excluded = 0;
    for (p, t) in pred.data().chunks_exact(d).zip(target.data().chunks_exact(d)) {
        match cosine(p, t) {
            Some(c) => {
                total += c;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    if used == 0 {
        return Err(Error::Degenerate(format!("all {excluded} rows have zero norm (100% excluded)")));
    }
    Ok(RowScore {
        gamma: total / used as f64,
        n_rows: used,
        excluded,
    })
}

/// Linearity score γ with exclusion counts.
pub fn linearity_score_detailed(approx: &LinearApproximator, inputs: &Tensor, targets: &Tensor) -> Result<RowScore> {
    let inputs = as_rows(inputs)?;
    let targets = as_rows(targets)?;
    if inputs.n_rows() != targets.n_rows() || inputs.last_dim() != approx.d_in() || targets.last_dim() != approx.d_out() {
        return Err(Error::Shape(format!(
            "approximator {}→{} against inputs {:?} and targets {:?}",
            approx.d_in(),
            approx.d_out(),
            inputs.shape(),
            targets.shape()
        )));
    }
    score_rows(&approx.apply(&inputs)?, &targets)
}

/// γ: mean cosine between `targets` and `approx(inputs)`.
pub fn linearity_score(approx: &LinearApproximator, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
    Ok(linearity_score_detailed(approx, inputs, targets)?.gamma)
}

/// Recipe for fitting approximators: 3 epochs, batch 64, Adam at 1e-3.
pub fn approximator_recipe() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 64,
        adam: AdamConfig::default(),
    }
}

/// Randomly initialized approximator (the starting point of a fit).
pub fn init_approximator(d_in: usize, d_out: usize, stream: Stream) -> LinearApproximator {
    let l = Linear::init(d_in, d_out, stream);
    LinearApproximator {
        weight: l.weight,
        bias: l.bias,
        target_block: String::new(),
        trained_on: 0,
        excluded_rows: 0,
    }
}

/// Fits an affine map by minimizing `1 − mean cos(target, prediction)`.
/// Inputs and targets may carry extra leading axes; rows are pooled.
/// Zero-norm target rows are dropped and counted.
pub fn fit_approximator(inputs: &Tensor, targets: &Tensor, cfg: &TrainConfig, stream: Stream) -> Result<LinearApproximator> {
    cfg.validate()?;
    let inputs = as_rows(inputs)?;
    let targets = as_rows(targets)?;
    if inputs.n_rows() != targets.n_rows() {
        return Err(Error::Shape(format!("{} input rows vs {} target rows", inputs.n_rows(), targets.n_rows())));
    }
    let keep: Vec<usize> = (0..targets.n_rows()).filter(|&r| dot(targets.row(r), targets.row(r)) > 0.0).collect();
    let excluded = targets.n_rows() - keep.len();
    if keep.is_empty() {
        return Err(Error::Degenerate(format!("all {excluded} target rows have zero norm (100% excluded)")));
    }
    if excluded > 0 {
        log::warn!("fit_approximator: excluded {excluded} zero-norm target rows");
    }
    let (inputs, targets) = if excluded > 0 {
        (inputs.select_rows(&keep), targets.select_rows(&keep))
    } else {
        (inputs, targets)
    };
    let mut approx = init_approximator(inputs.last_dim(), targets.last_dim(), stream.derive("init"));
    approx.trained_on = keep.len();
    approx.excluded_rows = excluded;
    let mut opt = AdamState::new(cfg.adam);
    for epoch in 0..cfg.epochs {
        for idx in batches(keep.len(), cfg.batch_size, true, stream.derive("batches"), epoch as u64) {
            let mut g = Graph::<f32>::new();
            let x = g.constant_f32(&inputs.select_rows(&idx));
            let t = g.constant_f32(&targets.select_rows(&idx));
            let w = g.param("weight", &approx.weight);
            let b = g.param("bias", &approx.bias);
            let y = g.linear(x, w, Some(b))?;
            let (loss, _) = g.cosine_loss(y, t)?;
            let grads = g.backward(loss)?;
            opt.update(
                [("weight".to_string(), &mut approx.weight), ("bias".to_string(), &mut approx.bias)],
                &grads.params,
            )?;
        }
    }
    if !approx.weight.is_finite() || !approx.bias.is_finite() {
        return Err(Error::Divergence {
            step: opt.step_count(),
            last_finite_loss: f32::NAN,
        });
    }
    Ok(approx)
}

/// One probed block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    /// `sa_ff`, `mlp`, `conv` or `dense`.
    pub probe: String,
    /// 1-based stack position.
    pub layer: usize,
    pub gamma: f64,
    pub cone_size: f64,
    pub gamma_norm: f64,
    pub n_eval_samples: usize,
    pub n_pairs: usize,
    pub excluded_rows: usize,
    pub seed: u64,
    /// Tap the approximator mimics (always the pre-residual core output).
    pub probe_point: String,
    /// Which token positions were pooled; `all` for fixed-length inputs.
    pub token_filter: String,
    /// γ on the fitting rows, after and before training.
    pub gamma_train: f64,
    pub gamma_untrained: f64,
}

impl LinearityReport {
    pub const CSV_HEADER: &'static str =
        "probe,layer,gamma,cone_size,gamma_norm,n_eval_samples,n_pairs,excluded_rows,seed";

    /// Whether the stored normalization matches its inputs to `tol`.
    pub fn identity_holds(&self, tol: f64) -> bool {
        let expect = (self.gamma - self.cone_size) / (1.0 - self.cone_size);
        (self.gamma_norm - expect).abs() <= tol && self.gamma_norm <= 1.0
    }
}

/// Which blocks to probe and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub kinds: Vec<BlockKind>,
    /// 1-based positions; empty means every layer holding the block.
    pub layers: Vec<usize>,
    pub n_pairs: usize,
    pub fit: TrainConfig,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        ProbeSpec {
            kinds: vec![BlockKind::SaFf, BlockKind::Mlp],
            layers: Vec::new(),
            n_pairs: 1000,
            fit: approximator_recipe(),
        }
    }
}

/// Probes blocks of `model`: fits each core's approximator on `fit_data`,
/// then scores it and measures the core-output cone on `eval_data`.
/// Token rows are pooled across batch and sequence positions.
pub fn probe_model(model: &Model, fit_data: &Dataset, eval_data: &Dataset, spec: &ProbeSpec, stream: Stream) -> Result<Vec<LinearityReport>> {
    let mut targets = Vec::new();
    for &kind in &spec.kinds {
        let positions: Vec<usize> = if spec.layers.is_empty() {
            (1..=model.n_layers()).filter(|&p| model.layer_at(p).is_ok_and(|l| l.block(kind).is_some())).collect()
        } else {
            spec.layers.clone()
        };
        if positions.is_empty() {
            return Err(Error::Lookup(format!("model has no {} blocks", kind.tap_name())));
        }
        for &p in &positions {
            if model.layer_at(p)?.block(kind).is_none() {
                return Err(Error::Lookup(format!("layer {p} has no {} block", kind.tap_name())));
            }
            targets.push((kind, p));
        }
    }
    let mut reports = Vec::with_capacity(targets.len());
    for (kind, p) in targets {
        let base = format!("layer{p}.{}", kind.tap_name());
        let (tin, tout) = (format!("{base}.block_in"), format!("{base}.core_out"));
        let fit = collect_taps(model, fit_data, &[&tin, &tout])?;
        let eval = collect_taps(model, eval_data, &[&tin, &tout])?;
        let probe_stream = stream.derive(&base);
        let (fit_in, fit_out) = (as_rows(&fit[0])?, as_rows(&fit[1])?);
        let (eval_in, eval_out) = (as_rows(&eval[0])?, as_rows(&eval[1])?);

        let untrained = init_approximator(fit_in.last_dim(), fit_out.last_dim(), probe_stream.derive("fit").derive("init"));
        let mut approx = fit_approximator(&fit_in, &fit_out, &spec.fit, probe_stream.derive("fit"))?;
        approx.target_block = tout.clone();
        let score = linearity_score_detailed(&approx, &eval_in, &eval_out)?;
        let gamma_train = linearity_score(&approx, &fit_in, &fit_out)?;
        let gamma_untrained = linearity_score(&untrained, &fit_in, &fit_out)?;

        // Cone over the nonzero core outputs of the evaluation split.
        let nonzero: Vec<usize> = (0..eval_out.n_rows()).filter(|&r| dot(eval_out.row(r), eval_out.row(r)) > 0.0).collect();
        let population = eval_out.select_rows(&nonzero);
        let cone = cone_size(&population, spec.n_pairs, &mut probe_stream.derive("cone").rng())?;
        let gamma_norm = normalized_linearity(score.gamma, cone)?;
        reports.push(LinearityReport {
            probe: serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string(),
            layer: p,
            gamma: score.gamma,
            cone_size: cone,
            gamma_norm,
            n_eval_samples: score.n_rows,
            n_pairs: spec.n_pairs,
            excluded_rows: score.excluded,
            seed: probe_stream.seed(),
            probe_point: "core_out".into(),
            token_filter: "all".into(),
            gamma_train,
            gamma_untrained,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(rows: &[Vec<f32>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap();
        assert_eq!(cosine_similarity(&v, &v).unwrap(), 1.0);
        let a = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        // 32 / sqrt(14 · 77)
        assert!((cosine_similarity(&a, &b).unwrap() - 0.974_631_846).abs() < 1e-4);
        let z = Tensor::zeros(&[3]);
        assert!(matches!(cosine_similarity(&a, &z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cone_extremes() {
        let mut rng = Stream::root(1).rng();
        let same = t(&vec![vec![0.2, -1.5, 3.0]; 10]);
        assert_eq!(cone_size(&same, 1000, &mut rng).unwrap(), 1.0);
        let basis: Vec<Vec<f32>> = (0..8).map(|i| (0..8).map(|j| f32::from(u8::from(i == j))).collect()).collect();
        assert_eq!(cone_size(&t(&basis), 1000, &mut rng).unwrap(), 0.0);
        assert!(cone_size(&t(&[vec![1.0]]), 10, &mut rng).is_err());
        let with_zero = t(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(cone_size(&with_zero, 5, &mut rng), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalized_linearity(0.4, 0.4).unwrap(), 0.0);
        assert_eq!(normalized_linearity(1.0, 0.37).unwrap(), 1.0);
        assert!((normalized_linearity(0.9, 0.6).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(normalized_linearity(0.9, 1.0), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn normalization_is_increasing(cone in -0.99f64..0.99, g1 in -1.0f64..1.0, g2 in -1.0f64..1.0) {
            prop_assume!(g1 < g2);
            prop_assert!(normalized_linearity(g1, cone).unwrap() < normalized_linearity(g2, cone).unwrap());
        }
    }

    #[test]
    fn identity_approximator_scores_one() {
        let x = t(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.1, 0.1]]);
        assert_eq!(linearity_score(&LinearApproximator::identity(2), &x, &x).unwrap(), 1.0);
    }

    #[test]
    fn orthogonal_prediction_scores_zero() {
        // Rotation by 90°: every prediction is orthogonal to its target.
        let mut a = LinearApproximator::identity(2);
        a.weight = Tensor::new(vec![2, 2], vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let x = t(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert_eq!(linearity_score(&a, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn zero_targets_are_excluded_and_counted() {
        let x = t(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.4, 0.1]]);
        let y = t(&[vec![1.0, 2.0], vec![0.0, 0.0], vec![0.4, 0.1]]);
        let s = linearity_score_detailed(&LinearApproximator::identity(2), &x, &y).unwrap();
        assert_eq!((s.n_rows, s.excluded, s.gamma), (2, 1, 1.0));
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..approximator_recipe() };
        let a = fit_approximator(&x, &y, &cfg, Stream::root(0)).unwrap();
        assert_eq!((a.trained_on, a.excluded_rows), (2, 1));
        let zeros = Tensor::zeros(&[3, 2]);
        assert!(matches!(fit_approximator(&x, &zeros, &cfg, Stream::root(0)), Err(Error::Degenerate(_))));
    }
}
