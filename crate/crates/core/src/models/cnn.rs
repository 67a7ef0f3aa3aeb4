use serde::{Deserialize, Serialize};

use super::{normal_tensor, Activation, Block, BlockKind, Core, Family, Layer, Linear, Model, Norm, Stem};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnnVariant {
    Plain,
    /// Layer norm over each image's feature map after every convolution.
    Ln,
    /// As `Ln`, plus an identity skip around every channel-preserving layer.
    LnSc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub n_conv_layers: usize,
    pub channels: usize,
    pub variant: CnnVariant,
    pub n_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Stride of the first (1 → channels) convolution.
    pub first_stride: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            n_conv_layers: 12,
            channels: 16,
            variant: CnnVariant::LnSc,
            n_classes: 10,
            input_height: 28,
            input_width: 28,
            first_stride: 2,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_conv_layers == 0
            || self.channels == 0
            || self.n_classes == 0
            || self.input_height == 0
            || self.input_width == 0
            || self.first_stride == 0
        {
            return Err(Error::Config(format!("cnn dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `out_hw` is the spatial size after this layer; the norm covers the whole
/// H×W×C feature map of each image.
fn conv_layer(c_in: usize, c_out: usize, stride: usize, out_hw: usize, variant: CnnVariant, stream: Stream) -> Layer {
    // He-normal: the ±1/√fan_in default leaves a 12-deep plain ReLU stack
    // stuck at chance.
    let fan_in = 9 * c_in;
    let kernel = normal_tensor(&[c_out, fan_in], (2.0 / fan_in as f32).sqrt(), stream);
    let preserving = c_in == c_out && stride == 1;
    Layer {
        blocks: vec![Block {
            kind: BlockKind::Conv,
            core: Core::Conv {
                kernel,
                bias: Tensor::zeros(&[c_out]),
                stride,
            },
            activation: Some(Activation::Relu),
            skip: variant == CnnVariant::LnSc && preserving,
            norm: (variant != CnnVariant::Plain).then(|| Norm::new(out_hw * c_out)),
        }],
    }
}

/// Stack of 3×3 convolutions with ReLU, global average pool, dense head.
pub fn build_cnn(cfg: &CnnConfig, init_seed: u64) -> Result<Model> {
    cfg.validate()?;
    let root = Stream::root(init_seed).derive("init");
    let c = cfg.channels;
    let out = |n: usize| (n - 1) / cfg.first_stride + 1;
    let hw = out(cfg.input_height) * out(cfg.input_width);
    let layers = (0..cfg.n_conv_layers)
        .map(|i| {
            let s = root.derive_idx("layer", i as u64);
            if i == 0 {
                conv_layer(1, c, cfg.first_stride, hw, cfg.variant, s)
            } else {
                conv_layer(c, c, 1, hw, cfg.variant, s)
            }
        })
        .collect();
    Ok(Model {
        family: Family::Cnn(cfg.clone()),
        stem: Stem::Image {
            height: cfg.input_height,
            width: cfg.input_width,
        },
        layers,
        order: (0..cfg.n_conv_layers).collect(),
        head: Linear::init(c, cfg.n_classes, root.derive("head")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize) -> Tensor {
        Tensor::new(vec![n, 784], (0..n * 784).map(|i| ((i * 31) % 256) as f32 / 255.0).collect()).unwrap()
    }

    #[test]
    fn plain_parameter_count_closed_form() {
        let cfg = CnnConfig { variant: CnnVariant::Plain, ..Default::default() };
        let m = build_cnn(&cfg, 0).unwrap();
        let head = 16 * 10 + 10;
        assert_eq!(m.count_params().total, 16 * 9 + 16 + 11 * (16 * 16 * 9 + 16) + head);
    }

    #[test]
    fn zero_kernels_with_skip_pass_normalized_input() {
        let cfg = CnnConfig { n_conv_layers: 4, ..Default::default() };
        let mut m = build_cnn(&cfg, 0).unwrap();
        for layer in m.layers.iter_mut().skip(1) {
            if let Core::Conv { kernel, bias, .. } = &mut layer.blocks[0].core {
                kernel.data_mut().iter_mut().for_each(|v| *v = 0.0);
                bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = images(2);
        let out = m.forward_with_taps(&x, &["layer2.conv.block_in", "layer2.conv.core_out", "layer4.conv.block_out"]).unwrap();
        assert!(out.taps["layer2.conv.core_out"].data().iter().all(|&v| v == 0.0));
        // Each zero-kernel block reduces to norm(block_in) at unit gain and
        // zero bias; three of them applied to layer 2's input give layer 4's output.
        let d = 14 * 14 * cfg.channels;
        let (gain, bias) = (Tensor::full(&[d], 1.0f32), Tensor::zeros(&[d]));
        let mut expect = out.taps["layer2.conv.block_in"].reshape(&[2, d]).unwrap();
        for _ in 0..3 {
            expect = crate::tensor::ops::layer_norm(&expect, &gain, &bias).unwrap();
        }
        for (p, q) in expect.data().iter().zip(out.taps["layer4.conv.block_out"].data()) {
            assert!((p - q).abs() < 1e-5);
        }
        assert_eq!(m.logits(&x).unwrap(), m.logits(&x).unwrap());
        assert!(m.logits(&x).unwrap().is_finite());
    }

    #[test]
    fn first_layer_has_a_different_signature() {
        let m = build_cnn(&CnnConfig::default(), 0).unwrap();
        assert_ne!(m.layers[0].signature(), m.layers[1].signature());
        assert!(!m.layers[0].is_shape_preserving());
        assert!(m.layers[1].is_shape_preserving());
        assert!(m.layers[1].blocks[0].skip && !m.layers[0].blocks[0].skip);
    }
}
