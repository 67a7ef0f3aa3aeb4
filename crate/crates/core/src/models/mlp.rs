use serde::{Deserialize, Serialize};

use super::{Activation, Block, BlockKind, Core, Family, Layer, Linear, Model, Stem};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// One-hidden-layer perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_classes: usize,
    /// ReLU on the hidden layer; `false` leaves it affine.
    pub nonlinear: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_dim: 784,
            hidden_dim: 768,
            n_classes: 10,
            nonlinear: true,
        }
    }
}

pub fn build_mlp(cfg: &MlpConfig, init_seed: u64) -> Result<Model> {
    if cfg.input_dim == 0 || cfg.hidden_dim == 0 || cfg.n_classes == 0 {
        return Err(Error::Config(format!("mlp dimensions must be positive: {cfg:?}")));
    }
    let root = Stream::root(init_seed).derive("init");
    let hidden = Block {
        kind: BlockKind::Dense,
        core: Core::Dense(Linear::init(cfg.input_dim, cfg.hidden_dim, root.derive("hidden"))),
        activation: cfg.nonlinear.then_some(Activation::Relu),
        skip: false,
        norm: None,
    };
    Ok(Model {
        family: Family::Mlp(cfg.clone()),
        stem: Stem::Flat,
        layers: vec![Layer { blocks: vec![hidden] }],
        order: vec![0],
        head: Linear::init(cfg.hidden_dim, cfg.n_classes, root.derive("head")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mnist_mlp_parameter_count() {
        let m = build_mlp(&MlpConfig::default(), 0).unwrap();
        assert_eq!(m.count_params().total, 784 * 768 + 768 + 768 * 10 + 10);
        assert_eq!(m.count_params().total, 610_570);
    }

    #[test]
    fn identity_padded_linear_hidden_is_the_input() {
        let cfg = MlpConfig { input_dim: 3, hidden_dim: 5, n_classes: 2, nonlinear: false };
        let mut m = build_mlp(&cfg, 0).unwrap();
        let Core::Dense(l) = &mut m.layers[0].blocks[0].core else { panic!() };
        let mut w = vec![0.0f32; 15];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        l.weight = Tensor::new(vec![5, 3], w).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        let out = m.forward_with_taps(&x, &["hidden"]).unwrap();
        let h = &out.taps["hidden"];
        for r in 0..2 {
            assert_eq!(&h.row(r)[..3], x.row(r));
            assert_eq!(&h.row(r)[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_logits() {
        let m = build_mlp(&MlpConfig::default(), 4).unwrap();
        let l = m.logits(&Tensor::zeros(&[2, 784])).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        let cfg = MlpConfig { hidden_dim: 0, ..Default::default() };
        assert!(matches!(build_mlp(&cfg, 0), Err(Error::Config(_))));
    }
}
