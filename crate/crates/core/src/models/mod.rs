//! Model families behind one layer-stack interface.
//!
//! A [`Model`] is an input stage, a stack of [`Layer`]s and a classification
//! head. Each layer holds one or more [`Block`]s; a block is a *core*
//! (attention, feed-forward, convolution, dense, affine or removed) followed
//! optionally by a skip connection and a layer norm:
//!
//! ```text
//! block_out = norm(core(block_in) + block_in)   // skip + norm
//! ```
//!
//! The stack is addressed through `order`, a list of indices into `layers`.
//! Surgery reorders, drops or repeats entries of `order`; repeating an index
//! ties the weights of every copy.
//!
//! Every forward pass records taps named `layer{p}.{block}.{point}` where
//! `p` is the 1-based stack position, `block` is `attn`, `ffn`, `dense` or
//! `conv`, and `point` is `block_in`, `core_out` or `block_out`. The
//! encoder also records `embed`, the MLP records `hidden`, and every model
//! records `logits`.

mod cnn;
mod encoder;
mod mlp;

pub use cnn::{build_cnn, CnnConfig, CnnVariant};
pub use encoder::{build_encoder, EncoderConfig, EncoderVariant};
pub use mlp::{build_mlp, MlpConfig};

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Graph, NodeId, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Which slot of a layer a block fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Attention block; its core is self-attention plus output projection.
    SaFf,
    /// Position-wise feed-forward block of an encoder layer.
    Mlp,
    Conv,
    Dense,
}

impl BlockKind {
    pub fn tap_name(self) -> &'static str {
        match self {
            BlockKind::SaFf => "attn",
            BlockKind::Mlp => "ffn",
            BlockKind::Conv => "conv",
            BlockKind::Dense => "dense",
        }
    }
}

/// Affine map `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_out, d_in]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    /// Uniform `±1/√d_in` weights, zero bias.
    pub(crate) fn init(d_in: usize, d_out: usize, stream: Stream) -> Self {
        Linear {
            weight: uniform_tensor(&[d_out, d_in], 1.0 / (d_in as f32).sqrt(), stream),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, name: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{name}.weight"), &self.weight);
        let b = g.param(&format!("{name}.bias"), &self.bias);
        g.linear(x, w, Some(b))
    }

    fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, name: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{name}.weight"), &mut self.weight));
        out.push((format!("{name}.bias"), &mut self.bias));
    }
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f32, stream: Stream) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    let mut rng = stream.rng();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
}

pub(crate) fn normal_tensor(shape: &[usize], std: f32, stream: Stream) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let mut rng = stream.rng();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    pub fn new(d: usize) -> Self {
        Norm {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    /// Normalizes over the trailing dims whose product is the gain length
    /// (one dim for tokens, H·W·C for feature maps).
    fn forward<T: Real>(&self, g: &mut Graph<T>, name: &str, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&format!("{name}.gain"), &self.gain);
        let bias = g.param(&format!("{name}.bias"), &self.bias);
        let shape = g.shape(x).to_vec();
        let d = self.gain.numel();
        if shape.last() == Some(&d) {
            return g.layer_norm(x, gain, bias);
        }
        let numel: usize = shape.iter().product();
        let mut trailing = 1;
        for &s in shape.iter().rev() {
            trailing *= s;
            if trailing >= d {
                break;
            }
        }
        if trailing != d || numel % d != 0 {
            return Err(Error::Shape(format!("norm of size {d} does not match trailing dims of {shape:?}")));
        }
        let flat = g.reshape(x, &[numel / d, d])?;
        let y = g.layer_norm(flat, gain, bias)?;
        g.reshape(y, &shape)
    }
}

/// The computation a block wraps with its skip connection and norm.
#[derive(Clone, Debug, PartialEq)]
pub enum Core {
    SelfAttention {
        query: Linear,
        key: Linear,
        value: Linear,
        output: Linear,
        heads: usize,
    },
    FeedForward {
        up: Linear,
        down: Linear,
        activation: Activation,
    },
    /// A single affine map, e.g. a fitted linear approximator.
    Affine(Linear),
    /// 3×3, padding-1 convolution, kernel stored `[c_out, 9·c_in]`.
    Conv {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
    },
    Dense(Linear),
    /// Removed core: contributes zeros of the block-input shape.
    Zero,
}

/// Core, optional activation, then optional skip and norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub core: Core,
    /// Applied to the core output, before the skip connection.
    pub activation: Option<Activation>,
    pub skip: bool,
    pub norm: Option<Norm>,
}

impl Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match &self.core {
            Core::SelfAttention { query, key, value, output, .. } => {
                query.collect(&format!("{prefix}.query"), out);
                key.collect(&format!("{prefix}.key"), out);
                value.collect(&format!("{prefix}.value"), out);
                output.collect(&format!("{prefix}.output"), out);
            }
            Core::FeedForward { up, down, .. } => {
                up.collect(&format!("{prefix}.up"), out);
                down.collect(&format!("{prefix}.down"), out);
            }
            Core::Affine(l) => l.collect(&format!("{prefix}.affine"), out),
            Core::Dense(l) => l.collect(&format!("{prefix}.dense"), out),
            Core::Conv { kernel, bias, .. } => {
                out.push((format!("{prefix}.kernel"), kernel));
                out.push((format!("{prefix}.bias"), bias));
            }
            Core::Zero => {}
        }
        if let Some(n) = &self.norm {
            out.push((format!("{prefix}.norm.gain"), &n.gain));
            out.push((format!("{prefix}.norm.bias"), &n.bias));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match &mut self.core {
            Core::SelfAttention { query, key, value, output, .. } => {
                query.collect_mut(&format!("{prefix}.query"), out);
                key.collect_mut(&format!("{prefix}.key"), out);
                value.collect_mut(&format!("{prefix}.value"), out);
                output.collect_mut(&format!("{prefix}.output"), out);
            }
            Core::FeedForward { up, down, .. } => {
                up.collect_mut(&format!("{prefix}.up"), out);
                down.collect_mut(&format!("{prefix}.down"), out);
            }
            Core::Affine(l) => l.collect_mut(&format!("{prefix}.affine"), out),
            Core::Dense(l) => l.collect_mut(&format!("{prefix}.dense"), out),
            Core::Conv { kernel, bias, .. } => {
                out.push((format!("{prefix}.kernel"), kernel));
                out.push((format!("{prefix}.bias"), bias));
            }
            Core::Zero => {}
        }
        if let Some(n) = &mut self.norm {
            out.push((format!("{prefix}.norm.gain"), &mut n.gain));
            out.push((format!("{prefix}.norm.bias"), &mut n.bias));
        }
    }

    /// Runs the block, recording `block_in`, `core_out` and `block_out` taps.
    fn forward<T: Real>(&self, g: &mut Graph<T>, prefix: &str, tap: &str, x: NodeId) -> Result<NodeId> {
        g.tap(format!("{tap}.block_in"), x);
        let core = match &self.core {
            Core::SelfAttention { query, key, value, output, heads } => {
                let q = query.forward(g, &format!("{prefix}.query"), x)?;
                let k = key.forward(g, &format!("{prefix}.key"), x)?;
                let v = value.forward(g, &format!("{prefix}.value"), x)?;
                let ctx = g.attention(q, k, v, *heads)?;
                output.forward(g, &format!("{prefix}.output"), ctx)?
            }
            Core::FeedForward { up, down, activation } => {
                let h = up.forward(g, &format!("{prefix}.up"), x)?;
                let h = activate(g, *activation, h);
                down.forward(g, &format!("{prefix}.down"), h)?
            }
            Core::Affine(l) => l.forward(g, &format!("{prefix}.affine"), x)?,
            Core::Dense(l) => l.forward(g, &format!("{prefix}.dense"), x)?,
            Core::Conv { kernel, bias, stride } => {
                let k = g.param(&format!("{prefix}.kernel"), kernel);
                let b = g.param(&format!("{prefix}.bias"), bias);
                g.conv2d(x, k, b, *stride)?
            }
            Core::Zero => {
                let shape = g.shape(x).to_vec();
                g.constant(Tensor::zeros(&shape))
            }
        };
        let core = match self.activation {
            Some(a) => activate(g, a, core),
            None => core,
        };
        g.tap(format!("{tap}.core_out"), core);
        let mut out = core;
        if self.skip {
            out = g.add(core, x)?;
        }
        if let Some(n) = &self.norm {
            out = n.forward(g, &format!("{prefix}.norm"), out)?;
        }
        g.tap(format!("{tap}.block_out"), out);
        Ok(out)
    }

    /// `(input feature dim, output feature dim, spatial stride)`.
    fn io(&self) -> Option<(usize, usize, usize)> {
        match &self.core {
            Core::SelfAttention { query, .. } => Some((query.d_in(), query.d_in(), 1)),
            Core::FeedForward { up, down, .. } => Some((up.d_in(), down.d_out(), 1)),
            Core::Affine(l) | Core::Dense(l) => Some((l.d_in(), l.d_out(), 1)),
            Core::Conv { kernel, stride, .. } => {
                Some((kernel.shape()[1] / 9, kernel.shape()[0], *stride))
            }
            Core::Zero => None,
        }
    }

    fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v.iter().map(|(_, t)| t.numel()).sum()
    }
}

fn activate<T: Real>(g: &mut Graph<T>, a: Activation, x: NodeId) -> NodeId {
    match a {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

/// One entry of the layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub blocks: Vec<Block>,
}

impl Layer {
    pub fn block(&self, kind: BlockKind) -> Option<&Block> {
        self.blocks.iter().find(|b| b.kind == kind)
    }

    pub fn block_mut(&mut self, kind: BlockKind) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.kind == kind)
    }

    /// Shape signature used for swap compatibility: `(d_in, d_out, stride)`.
    /// Layers are interchangeable when their signatures are equal and map a
    /// shape onto itself.
    pub fn signature(&self) -> Option<(usize, usize, usize)> {
        let mut sig: Option<(usize, usize, usize)> = None;
        for b in &self.blocks {
            if let Some((i, o, s)) = b.io() {
                sig = Some(match sig {
                    None => (i, o, s),
                    Some((i0, _, s0)) => (i0, o, s0 * s),
                });
            }
        }
        sig
    }

    pub fn is_shape_preserving(&self) -> bool {
        // A layer whose cores are all removed still maps its input through
        // skip + norm and so preserves shape.
        self.signature().is_none_or(|(i, o, s)| i == o && s == 1)
    }
}

/// How raw dataset rows enter the model.
#[derive(Clone, Debug, PartialEq)]
pub enum Stem {
    /// Token + learned position embeddings, then layer norm.
    Embeddings {
        token: Tensor,
        position: Tensor,
        norm: Norm,
    },
    /// Rows are fed to the first layer unchanged.
    Flat,
    /// Rows of `height·width` pixels are reshaped to NHWC with one channel.
    Image { height: usize, width: usize },
}

/// Which family a model was built as, with its build configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Encoder(EncoderConfig),
    Mlp(MlpConfig),
    Cnn(CnnConfig),
}

/// Input stage, layer stack and classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub family: Family,
    pub stem: Stem,
    /// Unique parameter sets.
    pub layers: Vec<Layer>,
    /// Execution order, as indices into `layers`; repeated entries share weights.
    pub order: Vec<usize>,
    pub head: Linear,
}

/// Scalar parameter counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Subtotals keyed by `embedding`, `head` or a block kind (`sa_ff`, `mlp`,
    /// `conv`, `dense`); block subtotals include their norms.
    pub by_kind: BTreeMap<String, usize>,
}

impl ParamCount {
    pub fn get(&self, key: &str) -> usize {
        self.by_kind.get(key).copied().unwrap_or(0)
    }

    /// Parameters inside the layer stack (all block subtotals).
    pub fn stack_total(&self) -> usize {
        self.total - self.get("embedding") - self.get("head")
    }
}

/// Result of [`Model::forward_with_taps`].
#[derive(Clone, Debug)]
pub struct TapOutput {
    pub logits: Tensor,
    pub taps: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn n_layers(&self) -> usize {
        self.order.len()
    }

    /// Layer at 1-based stack position `pos`.
    pub fn layer_at(&self, pos: usize) -> Result<&Layer> {
        if pos == 0 || pos > self.order.len() {
            return Err(Error::Lookup(format!(
                "layer {pos} outside 1..={}",
                self.order.len()
            )));
        }
        Ok(&self.layers[self.order[pos - 1]])
    }

    /// Whether every position of the stack owns its own parameters.
    pub fn is_untied(&self) -> bool {
        let mut seen = vec![false; self.layers.len()];
        self.order.iter().all(|&i| !std::mem::replace(&mut seen[i], true))
    }

    /// Rewrites an untied model so `layers[k]` is the layer at position
    /// `k + 1`, dropping unreferenced layers. Tied stacks are left untouched.
    pub(crate) fn canonicalize(&mut self) {
        if !self.is_untied() {
            return;
        }
        let mut slots: Vec<Option<Layer>> = std::mem::take(&mut self.layers).into_iter().map(Some).collect();
        self.layers = self
            .order
            .iter()
            .map(|&i| slots[i].take().expect("untied order"))
            .collect();
        self.order = (0..self.layers.len()).collect();
    }

    fn layer_prefix(idx: usize) -> String {
        format!("layer{}", idx + 1)
    }

    /// Every trainable tensor with its archive name, in declaration order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Stem::Embeddings { token, position, norm } = &self.stem {
            out.push(("embed.token".to_string(), token));
            out.push(("embed.position".to_string(), position));
            out.push(("embed.norm.gain".to_string(), &norm.gain));
            out.push(("embed.norm.bias".to_string(), &norm.bias));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = Self::layer_prefix(i);
            for b in &layer.blocks {
                b.collect(&format!("{p}.{}", b.kind.tap_name()), &mut out);
            }
        }
        self.head.collect("head", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Stem::Embeddings { token, position, norm } = &mut self.stem {
            out.push(("embed.token".to_string(), token));
            out.push(("embed.position".to_string(), position));
            out.push(("embed.norm.gain".to_string(), &mut norm.gain));
            out.push(("embed.norm.bias".to_string(), &mut norm.bias));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = Self::layer_prefix(i);
            for b in &mut layer.blocks {
                let name = format!("{p}.{}", b.kind.tap_name());
                b.collect_mut(&name, &mut out);
            }
        }
        self.head.collect_mut("head", &mut out);
        out
    }

    /// Copies of all parameters keyed by name.
    pub fn param_map(&self) -> BTreeMap<String, Tensor> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn count_params(&self) -> ParamCount {
        let mut c = ParamCount::default();
        if let Stem::Embeddings { .. } = &self.stem {
            let n: usize = self.named_params()
                .iter()
                .filter(|(n, _)| n.starts_with("embed."))
                .map(|(_, t)| t.numel())
                .sum();
            c.by_kind.insert("embedding".into(), n);
        }
        for layer in &self.layers {
            for b in &layer.blocks {
                let key = serde_json::to_value(b.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default();
                *c.by_kind.entry(key).or_default() += b.param_count();
            }
        }
        c.by_kind
            .insert("head".into(), self.head.weight.numel() + self.head.bias.numel());
        c.total = c.by_kind.values().sum();
        c
    }

    /// Builds the forward graph on `inputs` (dataset rows) and returns the
    /// logits node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, inputs: &Tensor) -> Result<NodeId> {
        let batch = inputs.shape()[0];
        let mut x = match &self.stem {
            Stem::Embeddings { token, position, norm } => {
                let seq = inputs.numel() / batch;
                let max_seq = position.shape()[0];
                if seq > max_seq {
                    return Err(Error::Shape(format!("sequence length {seq} exceeds {max_seq}")));
                }
                let ids: Vec<usize> = inputs.data().iter().map(|&v| v as usize).collect();
                let table = g.param("embed.token", token);
                let tok = g.embedding(table, &ids, &[batch, seq])?;
                let pos_table = g.param("embed.position", position);
                let positions: Vec<usize> = (0..seq).collect();
                let pos = g.embedding(pos_table, &positions, &[seq])?;
                let x = g.add_trailing(tok, pos)?;
                let x = norm.forward(g, "embed.norm", x)?;
                g.tap("embed", x);
                x
            }
            Stem::Flat => {
                let x = g.constant_f32(inputs);
                let d = inputs.numel() / batch;
                g.reshape(x, &[batch, d])?
            }
            Stem::Image { height, width } => {
                if inputs.numel() != batch * height * width {
                    return Err(Error::Shape(format!(
                        "image rows of {:?} do not match {height}x{width}",
                        inputs.shape()
                    )));
                }
                let x = g.constant_f32(inputs);
                g.reshape(x, &[batch, *height, *width, 1])?
            }
        };
        for (pos, &li) in self.order.iter().enumerate() {
            let prefix = Self::layer_prefix(li);
            for b in &self.layers[li].blocks {
                let kind = b.kind.tap_name();
                x = b.forward(g, &format!("{prefix}.{kind}"), &format!("layer{}.{kind}", pos + 1), x)?;
            }
        }
        if let Family::Mlp(_) = self.family {
            if let Some(&id) = g.taps().get("layer1.dense.core_out") {
                g.tap("hidden", id);
            }
        }
        let features = match &self.stem {
            Stem::Embeddings { .. } => g.select_position(x, 0)?,
            Stem::Flat => x,
            Stem::Image { .. } => g.mean_pool(x)?,
        };
        let logits = self.head.forward(g, "head", features)?;
        g.tap("logits", logits);
        Ok(logits)
    }

    /// Plain inference.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let l = self.forward(&mut g, inputs)?;
        Ok(g.value(l).clone())
    }

    /// Logits plus the forward values of the requested taps.
    pub fn forward_with_taps(&self, inputs: &Tensor, taps: &[&str]) -> Result<TapOutput> {
        let mut g = Graph::<f32>::new();
        let l = self.forward(&mut g, inputs)?;
        let mut out = BTreeMap::new();
        for &name in taps {
            out.insert(name.to_string(), g.tap_value(name)?.clone());
        }
        Ok(TapOutput {
            logits: g.value(l).clone(),
            taps: out,
        })
    }

    /// Names of every tap a forward pass records.
    pub fn tap_names(&self, sample: &Tensor) -> Result<Vec<String>> {
        let mut g = Graph::<f32>::new();
        self.forward(&mut g, sample)?;
        Ok(g.taps().keys().cloned().collect())
    }
}
