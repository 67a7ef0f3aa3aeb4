use serde::{Deserialize, Serialize};

use super::{normal_tensor, Activation, Block, BlockKind, Core, Family, Layer, Linear, Model, Norm, Stem};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Standard,
    /// Attention blocks only.
    NoFfn,
    /// Attention blocks only, with GeLU applied to the attention core output.
    NoFfnGeluSa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_size: usize,
    pub ffn_inner_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub variant: EncoderVariant,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, 4 heads, hidden 64.
    pub fn toy() -> Self {
        EncoderConfig {
            n_layers: 4,
            n_heads: 4,
            hidden_size: 64,
            ffn_inner_size: 256,
            vocab_size: 64,
            max_seq_len: 32,
            variant: EncoderVariant::Standard,
            n_classes: 3,
        }
    }

    /// BERT-base sized configuration (parameter-count checks only).
    pub fn bert_base() -> Self {
        EncoderConfig {
            n_layers: 12,
            n_heads: 12,
            hidden_size: 768,
            ffn_inner_size: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            variant: EncoderVariant::Standard,
            n_classes: 3,
        }
    }

    /// BERT-small sized configuration (parameter-count checks only).
    pub fn bert_small() -> Self {
        EncoderConfig {
            n_layers: 6,
            n_heads: 8,
            hidden_size: 512,
            ffn_inner_size: 2048,
            vocab_size: 30522,
            max_seq_len: 128,
            variant: EncoderVariant::Standard,
            n_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("hidden_size", self.hidden_size),
            ("ffn_inner_size", self.ffn_inner_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn has_ffn(&self) -> bool {
        self.variant == EncoderVariant::Standard
    }

    fn attention_layer_params(&self) -> usize {
        let h = self.hidden_size;
        4 * (h * h + h) + 2 * h
    }

    fn ffn_block_params(&self) -> usize {
        let (h, f) = (self.hidden_size, self.ffn_inner_size);
        2 * h * f + f + h + 2 * h
    }

    /// Same width as `self` but attention-only, with enough layers that the
    /// total parameter count matches the standard model built from `self`.
    pub fn attention_only_at_parity(&self, variant: EncoderVariant) -> Self {
        let per_std = self.attention_layer_params() + self.ffn_block_params();
        let per_attn = self.attention_layer_params();
        let n = ((self.n_layers * per_std) as f64 / per_attn as f64).round() as usize;
        EncoderConfig {
            n_layers: n.max(1),
            variant,
            ..self.clone()
        }
    }
}

/// Transformer encoder: embeddings, `n_layers` post-norm encoder layers and a
/// classifier reading sequence position 0.
pub fn build_encoder(cfg: &EncoderConfig, init_seed: u64) -> Result<Model> {
    cfg.validate()?;
    let root = Stream::root(init_seed).derive("init");
    let h = cfg.hidden_size;
    let stem = Stem::Embeddings {
        token: normal_tensor(&[cfg.vocab_size, h], 1.0, root.derive("embed.token")),
        position: normal_tensor(&[cfg.max_seq_len, h], 1.0, root.derive("embed.position")),
        norm: Norm::new(h),
    };
    let layers = (0..cfg.n_layers)
        .map(|i| {
            let s = root.derive_idx("layer", i as u64);
            let mut blocks = vec![Block {
                kind: BlockKind::SaFf,
                core: Core::SelfAttention {
                    query: Linear::init(h, h, s.derive("query")),
                    key: Linear::init(h, h, s.derive("key")),
                    value: Linear::init(h, h, s.derive("value")),
                    output: Linear::init(h, h, s.derive("output")),
                    heads: cfg.n_heads,
                },
                activation: (cfg.variant == EncoderVariant::NoFfnGeluSa).then_some(Activation::Gelu),
                skip: true,
                norm: Some(Norm::new(h)),
            }];
            if cfg.has_ffn() {
                blocks.push(Block {
                    kind: BlockKind::Mlp,
                    core: Core::FeedForward {
                        up: Linear::init(h, cfg.ffn_inner_size, s.derive("up")),
                        down: Linear::init(cfg.ffn_inner_size, h, s.derive("down")),
                        activation: Activation::Gelu,
                    },
                    activation: None,
                    skip: true,
                    norm: Some(Norm::new(h)),
                });
            }
            Layer { blocks }
        })
        .collect();
    Ok(Model {
        family: Family::Encoder(cfg.clone()),
        stem,
        layers,
        order: (0..cfg.n_layers).collect(),
        head: Linear::init(h, cfg.n_classes, root.derive("head")),
    })
}
