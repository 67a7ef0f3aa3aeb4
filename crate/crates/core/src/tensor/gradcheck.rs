use std::collections::BTreeMap;

use rand::Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (parameter, flat index) of the worst entry.
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
}

/// Compares analytic gradients with central differences.
///
/// `forward` builds the loss on a fresh `f64` graph from `params`; it is
/// replayed with one parameter entry nudged by `±eps` for each sampled
/// entry. At most `samples_per_param` entries are drawn from each parameter
/// (all of them when the parameter is smaller). The error of one entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`; the floor keeps
/// identically-zero gradients (e.g. attention key biases) from being scored on
/// round-off alone.
pub fn grad_check<F>(
    params: &BTreeMap<String, Tensor>,
    forward: F,
    eps: f64,
    samples_per_param: usize,
    stream: Stream,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BTreeMap<String, Tensor>) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let mut g = Graph::<f64>::new();
    let loss = forward(&mut g, params)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar loss, got shape {:?}",
            g.shape(loss)
        )));
    }
    let grads = g.backward(loss)?;

    let eval = |name: &str, value: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        g.set_override(name, value);
        let l = forward(&mut g, params)?;
        Ok(g.value(l).data()[0])
    };

    let mut rng = stream.rng();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        n_checked: 0,
    };
    for (name, p) in params {
        let Some(analytic) = grads.params.get(name) else {
            return Err(Error::Contract(format!("parameter `{name}` is not used by the loss")));
        };
        let base: Tensor<f64> = p.cast();
        let idx: Vec<usize> = if p.numel() <= samples_per_param {
            (0..p.numel()).collect()
        } else {
            (0..samples_per_param).map(|_| rng.random_range(0..p.numel())).collect()
        };
        for i in idx {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            let numeric = (eval(name, plus)? - eval(name, minus)?) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.n_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
