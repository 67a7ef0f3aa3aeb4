//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and appends a node; node ids are therefore a
//! topological order and `backward` walks them in reverse.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddTrailing { x: NodeId, row: NodeId },
    Relu(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, stats: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, probs: Vec<T> },
    Embedding { table: NodeId, ids: Vec<usize> },
    Conv { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom },
    Reshape(NodeId),
    SelectPosition { x: NodeId, pos: usize },
    MeanPool(NodeId),
    Sum(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
    CosineLoss { pred: NodeId, target: NodeId, valid: Vec<bool>, n_valid: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddTrailing { x, row } => vec![*x, *row],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::MeanPool(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv { x, w, b, .. } => vec![*x, *w, *b],
            Op::SelectPosition { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::CosineLoss { pred, target, .. } => vec![*pred, *target],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
    taps: BTreeMap<String, NodeId>,
    overrides: HashMap<String, Tensor<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    pub params: BTreeMap<String, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node (zeros if the loss does not reach it).
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id).and_then(Option::as_ref)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            taps: BTreeMap::new(),
            overrides: HashMap::new(),
        }
    }

    /// Substitute the value used for parameter `name` in this graph.
    pub fn set_override(&mut self, name: &str, value: Tensor<T>) {
        self.overrides.insert(name.to_string(), value);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let needs_grad = matches!(op, Op::Param) || op.inputs().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn constant_f32(&mut self, value: &Tensor<f32>) -> NodeId {
        self.constant(value.cast())
    }

    /// Trainable leaf. Repeated registrations of one name share a node, so
    /// tied weights accumulate gradient from every use.
    pub fn param(&mut self, name: &str, value: &Tensor<f32>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let v = match self.overrides.get(name) {
            Some(o) => o.clone(),
            None => value.cast(),
        };
        let id = self.push(v, Op::Param);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    pub fn tap(&mut self, name: impl Into<String>, id: NodeId) {
        self.taps.insert(name.into(), id);
    }

    pub fn taps(&self) -> &BTreeMap<String, NodeId> {
        &self.taps
    }

    pub fn tap_value(&self, name: &str) -> Result<&Tensor<T>> {
        self.taps
            .get(name)
            .map(|&id| self.value(id))
            .ok_or_else(|| Error::Lookup(format!("unknown tap `{name}`")))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `x[..., in] · wᵀ + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || self.value(x).last_dim() != ws[1] {
            return Err(Error::Shape(format!(
                "linear: input {:?} against weight {:?}",
                self.shape(x),
                ws
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != ws[0] {
                return Err(Error::Shape(format!("linear: bias {:?} for {} outputs", self.shape(b), ws[0])));
            }
        }
        let xv = self.value(x);
        let n = xv.n_rows();
        let y = kernels::linear_forward(
            xv.data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            ws[1],
            ws[0],
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = ws[0];
        Ok(self.push(Tensor::from_parts(shape, y), Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds `row` (shape = trailing dims of `x`) to every leading index of `x`.
    pub fn add_trailing(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        let rs = self.shape(row);
        if rs.len() > xs.len() || xs[xs.len() - rs.len()..] != *rs {
            return Err(Error::Shape(format!("add_trailing: {xs:?} + {rs:?}")));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(r.len()) {
            for (v, &a) in chunk.iter_mut().zip(&r) {
                *v += a;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddTrailing { x, row }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(kernels::gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let mut data = self.value(a).data().to_vec();
        kernels::softmax_rows(&mut data, self.value(a).last_dim());
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: {d} features, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.numel()];
        let mut stats = vec![T::zero(); 2 * xv.n_rows()];
        kernels::layer_norm_forward(
            xv.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            &mut out,
            &mut stats,
        );
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, stats }))
    }

    /// Multi-head self-attention over `[batch, seq, hidden]` projections.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::Shape(format!("attention: {s:?} with {heads} heads")));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            s[0],
            s[1],
            s[2],
            heads,
        );
        Ok(self.push(Tensor::from_parts(s, out), Op::Attention { q, k, v, heads, probs }))
    }

    /// Row lookup: `ids` of shape `id_shape` into `table: [vocab, d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], id_shape: &[usize]) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape(format!("embedding: table {ts:?}, ids {id_shape:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::Shape(format!("embedding: id {bad} outside vocab {}", ts[0])));
        }
        let d = ts[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Embedding { table, ids: ids.to_vec() },
        ))
    }

    /// 3×3, padding-1 convolution over NHWC input; `w: [c_out, 9·c_in]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || stride == 0 {
            return Err(Error::Shape(format!("conv2d: expected NHWC input, got {xs:?}")));
        }
        let geom = ConvGeom { batch: xs[0], height: xs[1], width: xs[2], c_in: xs[3], stride };
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != geom.patch_len() {
            return Err(Error::Shape(format!(
                "conv2d: kernel {ws:?} for {} input channels",
                geom.c_in
            )));
        }
        if self.value(b).numel() != ws[0] {
            return Err(Error::Shape(format!("conv2d: bias {:?} for {} outputs", self.shape(b), ws[0])));
        }
        let y = kernels::conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), geom, ws[0]);
        let (ho, wo) = geom.out_hw();
        Ok(self.push(Tensor::from_parts(vec![geom.batch, ho, wo, ws[0]], y), Op::Conv { x, w, b, geom }))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `[batch, seq, d] → [batch, d]` at sequence position `pos`.
    pub fn select_position(&mut self, x: NodeId, pos: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pos >= s[1] {
            return Err(Error::Shape(format!("select_position {pos} of {s:?}")));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * s[2]);
        for b in 0..s[0] {
            let off = (b * s[1] + pos) * s[2];
            data.extend_from_slice(&xv[off..off + s[2]]);
        }
        Ok(self.push(Tensor::from_parts(vec![s[0], s[2]], data), Op::SelectPosition { x, pos }))
    }

    /// Mean over all axes between the first and the last: `[b, ..., c] → [b, c]`.
    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::Shape(format!("mean_pool of {s:?}")));
        }
        let (b, c) = (s[0], s[s.len() - 1]);
        let inner = s[1..s.len() - 1].iter().product::<usize>();
        let inv = T::one() / T::from_f64(inner as f64);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); b * c];
        for bi in 0..b {
            let acc = &mut data[bi * c..(bi + 1) * c];
            for row in xv[bi * inner * c..(bi + 1) * inner * c].chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        Ok(self.push(Tensor::from_parts(vec![b, c], data), Op::MeanPool(x)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!("cross_entropy: logits {s:?}, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::Shape(format!("cross_entropy: label {bad} for {} classes", s[1])));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_rows(&mut probs, s[1]);
        let tiny = T::min_positive_value();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                // Not `max`: a NaN probability must poison the loss.
                let p = probs[i * s[1] + l];
                -(if p < tiny { tiny } else { p }).ln()
            })
            .sum::<T>()
            / T::from_f64(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// `1 − mean cos(pred_row, target_row)` over rows whose target is nonzero.
    ///
    /// Returns the loss node and the number of excluded (zero-norm) rows.
    /// Errors when every row is excluded.
    pub fn cosine_loss(&mut self, pred: NodeId, target: NodeId) -> Result<(NodeId, usize)> {
        self.same_shape(pred, target, "cosine_loss")?;
        let d = self.value(pred).last_dim();
        let pv = self.value(pred).data();
        let tv = self.value(target).data();
        let mut valid = Vec::with_capacity(pv.len() / d);
        let mut total = T::zero();
        for (p, t) in pv.chunks_exact(d).zip(tv.chunks_exact(d)) {
            let tn = norm(t);
            if tn == T::zero() {
                valid.push(false);
                continue;
            }
            valid.push(true);
            total += dot(p, t) / (norm(p).max(T::min_positive_value()) * tn);
        }
        let n_valid = valid.iter().filter(|&&v| v).count();
        let excluded = valid.len() - n_valid;
        if n_valid == 0 {
            return Err(Error::Degenerate("every target row has zero norm".into()));
        }
        let loss = T::one() - total / T::from_f64(n_valid as f64);
        Ok((
            self.push(Tensor::scalar(loss), Op::CosineLoss { pred, target, valid, n_valid }),
            excluded,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![T::one()]);

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let ws = self.shape(*w);
                    let (d_out, d_in) = (ws[0], ws[1]);
                    let n = xv.n_rows();
                    let wd = self.value(*w).data();
                    let mut dx = self.take_if_needed(&mut grads, *x);
                    let mut dw = self.take_if_needed(&mut grads, *w);
                    let mut db = b.and_then(|b| self.take_if_needed(&mut grads, b));
                    kernels::linear_backward(
                        xv.data(),
                        wd,
                        &dy,
                        n,
                        d_in,
                        d_out,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    grads[*x] = dx;
                    grads[*w] = dw;
                    if let Some(b) = b {
                        grads[*b] = db;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &dy, self);
                    accumulate(&mut grads, *b, &dy, self);
                }
                Op::Mul(a, b) => {
                    let da: Vec<T> = dy.iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect();
                    let db: Vec<T> = dy.iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads, *a, &da, self);
                    accumulate(&mut grads, *b, &db, self);
                }
                Op::Scale(a, s) => {
                    let da: Vec<T> = dy.iter().map(|&g| g * *s).collect();
                    accumulate(&mut grads, *a, &da, self);
                }
                Op::AddTrailing { x, row } => {
                    accumulate(&mut grads, *x, &dy, self);
                    let mut dr = self.take_or_zero(&mut grads, *row);
                    let rl = dr.len();
                    for chunk in dy.chunks_exact(rl) {
                        for (g, &v) in dr.iter_mut().zip(chunk) {
                            *g += v;
                        }
                    }
                    grads[*row] = Some(dr);
                }
                Op::Relu(a) => {
                    let da: Vec<T> = dy
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *a, &da, self);
                }
                Op::Gelu(a) => {
                    let da: Vec<T> = dy
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    accumulate(&mut grads, *a, &da, self);
                }
                Op::Softmax(a) => {
                    let mut da = self.take_or_zero(&mut grads, *a);
                    kernels::softmax_backward_rows(node.value.data(), &dy, &mut da, node.value.last_dim());
                    grads[*a] = Some(da);
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let d = node.value.last_dim();
                    let mut dx = self.take_or_zero(&mut grads, *x);
                    let mut dg = self.take_or_zero(&mut grads, *gain);
                    let mut db = self.take_or_zero(&mut grads, *bias);
                    kernels::layer_norm_backward(
                        self.value(*x).data(),
                        self.value(*gain).data(),
                        stats,
                        &dy,
                        d,
                        &mut dx,
                        &mut dg,
                        &mut db,
                    );
                    grads[*x] = Some(dx);
                    grads[*gain] = Some(dg);
                    grads[*bias] = Some(db);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let s = node.value.shape();
                    let mut dq = self.take_or_zero(&mut grads, *q);
                    let mut dk = self.take_or_zero(&mut grads, *k);
                    let mut dv = self.take_or_zero(&mut grads, *v);
                    kernels::attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        &dy,
                        s[0],
                        s[1],
                        s[2],
                        *heads,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    grads[*q] = Some(dq);
                    grads[*k] = Some(dk);
                    grads[*v] = Some(dv);
                }
                Op::Embedding { table, ids } => {
                    let d = node.value.last_dim();
                    let mut dt = self.take_or_zero(&mut grads, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[i * d + c] += dy[r * d + c];
                        }
                    }
                    grads[*table] = Some(dt);
                }
                Op::Conv { x, w, b, geom } => {
                    let c_out = self.shape(*w)[0];
                    let mut dx = self.take_if_needed(&mut grads, *x);
                    let mut dw = self.take_if_needed(&mut grads, *w);
                    let mut db = self.take_if_needed(&mut grads, *b);
                    kernels::conv_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &dy,
                        *geom,
                        c_out,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    grads[*x] = dx;
                    grads[*w] = dw;
                    grads[*b] = db;
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, &dy, self),
                Op::SelectPosition { x, pos } => {
                    let s = self.shape(*x).to_vec();
                    let mut dx = self.take_or_zero(&mut grads, *x);
                    for b in 0..s[0] {
                        let off = (b * s[1] + pos) * s[2];
                        for c in 0..s[2] {
                            dx[off + c] += dy[b * s[2] + c];
                        }
                    }
                    grads[*x] = Some(dx);
                }
                Op::MeanPool(x) => {
                    let s = self.shape(*x).to_vec();
                    let (b, c) = (s[0], s[s.len() - 1]);
                    let inner = s[1..s.len() - 1].iter().product::<usize>();
                    let inv = T::one() / T::from_f64(inner as f64);
                    let mut dx = self.take_or_zero(&mut grads, *x);
                    for bi in 0..b {
                        for row in dx[bi * inner * c..(bi + 1) * inner * c].chunks_exact_mut(c) {
                            for (g, &v) in row.iter_mut().zip(&dy[bi * c..(bi + 1) * c]) {
                                *g += v * inv;
                            }
                        }
                    }
                    grads[*x] = Some(dx);
                }
                Op::Sum(a) => {
                    let g = dy[0];
                    let mut da = self.take_or_zero(&mut grads, *a);
                    da.iter_mut().for_each(|v| *v += g);
                    grads[*a] = Some(da);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = self.value(*logits).last_dim();
                    let scale = dy[0] / T::from_f64(labels.len() as f64);
                    let mut dl = self.take_or_zero(&mut grads, *logits);
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { T::one() } else { T::zero() };
                            dl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                    grads[*logits] = Some(dl);
                }
                Op::CosineLoss { pred, target, valid, n_valid } => {
                    let d = self.value(*pred).last_dim();
                    let scale = -dy[0] / T::from_f64(*n_valid as f64);
                    let pv = self.value(*pred).data();
                    let tv = self.value(*target).data();
                    let mut dp = self.take_or_zero(&mut grads, *pred);
                    for (r, &ok) in valid.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        let p = &pv[r * d..(r + 1) * d];
                        let t = &tv[r * d..(r + 1) * d];
                        let pn = norm(p).max(T::min_positive_value());
                        let tn = norm(t);
                        let cos = dot(p, t) / (pn * tn);
                        for i in 0..d {
                            dp[r * d + i] += scale * (t[i] / (pn * tn) - cos * p[i] / (pn * pn));
                        }
                    }
                    grads[*pred] = Some(dp);
                }
            }
            grads[id] = Some(dy);
        }

        let nodes: Vec<Option<Tensor<T>>> = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        let params = self
            .params
            .iter()
            .map(|(name, &id)| {
                let g = nodes[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[id].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { params, nodes })
    }

    fn take_if_needed(&self, grads: &mut [Option<Vec<T>>], id: NodeId) -> Option<Vec<T>> {
        self.nodes[id].needs_grad.then(|| self.take_or_zero(grads, id))
    }

    fn take_or_zero(&self, grads: &mut [Option<Vec<T>>], id: NodeId) -> Vec<T> {
        grads[id]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.nodes[id].value.numel()])
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T], graph: &Graph<T>) {
    if !graph.nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
        slot @ None => {
            debug_assert_eq!(g.len(), graph.nodes[id].value.numel());
            *slot = Some(g.to_vec());
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
