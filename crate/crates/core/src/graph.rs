//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is a topologically ordered list of nodes. Parameters live in a
//! separate [`ParamStore`] and enter the graph through `Param` leaf nodes, so
//! one store can back several graphs (frozen backbones, shared embeddings).
//! [`Graph::forward`] evaluates every node once and records a [`Tape`];
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into the store for trainable parameters only.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input {
        name: String,
    },
    Param(ParamId),
    /// Row gather. With `static_padding`, row 0 never receives gradient.
    EmbedLookup {
        table: NodeId,
        ids: NodeId,
        static_padding: bool,
    },
    /// Row `i` is the mean of the table rows listed in `bags[ids[i]]`; an empty
    /// bag yields a zero row.
    BagEmbed {
        table: NodeId,
        ids: NodeId,
        bags: Arc<Vec<Vec<usize>>>,
    },
    Conv1d {
        input: NodeId,
        filters: NodeId,
        bias: NodeId,
        stride: usize,
        activation: Activation,
    },
    GlobalMaxPool {
        input: NodeId,
    },
    WindowedMaxPool {
        input: NodeId,
        window: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        activation: Activation,
    },
    Softmax {
        input: NodeId,
    },
    AttentionPool {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Flatten {
        input: NodeId,
    },
    Sum {
        inputs: Vec<NodeId>,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::BagEmbed { .. } => "bag_embed",
            Op::Conv1d { .. } => "conv1d",
            Op::GlobalMaxPool { .. } => "global_maxpool",
            Op::WindowedMaxPool { .. } => "windowed_maxpool",
            Op::Dense { .. } => "dense",
            Op::Softmax { .. } => "softmax",
            Op::AttentionPool { .. } => "attention_pool",
            Op::Concat { .. } => "concat",
            Op::Flatten { .. } => "flatten",
            Op::Sum { .. } => "sum",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param(_) => vec![],
            Op::EmbedLookup { table, ids, .. } | Op::BagEmbed { table, ids, .. } => vec![*table, *ids],
            Op::Conv1d {
                input, filters, bias, ..
            } => vec![*input, *filters, *bias],
            Op::GlobalMaxPool { input }
            | Op::WindowedMaxPool { input, .. }
            | Op::Softmax { input }
            | Op::Flatten { input } => vec![*input],
            Op::Dense {
                input, weight, bias, ..
            }
            | Op::AttentionPool {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Concat { inputs, .. } | Op::Sum { inputs } => inputs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub label: String,
}

/// Named input values for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Feed {
    inputs: BTreeMap<String, Tensor>,
}

impl Feed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.inputs.insert(name.into(), value);
        self
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.inputs.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    /// Flat input offsets selected by a max pool, one per output element.
    Argmax(Vec<usize>),
    /// Attention scores `e` and weights `alpha`.
    Attention {
        scores: Vec<f64>,
        alphas: Vec<f64>,
    },
}

/// Values recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    values: Vec<Vec<f64>>,
    aux: Vec<Aux>,
    kink_margin: f64,
}

impl Tape {
    /// Value of a non-parameter node.
    pub fn value(&self, node: NodeId) -> &[f64] {
        &self.values[node]
    }

    /// Attention weights recorded at an `AttentionPool` node.
    pub fn alphas(&self, node: NodeId) -> Option<&[f64]> {
        match &self.aux[node] {
            Aux::Attention { alphas, .. } => Some(alphas),
            _ => None,
        }
    }

    /// Smallest distance to a non-differentiable point seen in this pass:
    /// `|z|` over relu pre-activations and the top-two gap of each max pool
    /// (pools whose top two values are both exactly zero are ignored).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }
}

#[cfg(test)]
thread_local! {
    /// Fault injection for the gradient checker tests: flips the sign of the
    /// conv filter gradient.
    pub(crate) static FLIP_CONV_FILTER_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

#[inline]
fn conv_filter_grad_sign() -> f64 {
    #[cfg(test)]
    {
        if FLIP_CONV_FILTER_GRAD.with(|f| f.get()) {
            return -1.0;
        }
    }
    1.0
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<NodeId>,
    named: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn inputs(&self) -> &[(String, NodeId)] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn output(&self, head: usize) -> NodeId {
        self.outputs[head]
    }

    /// A node registered under a name (feature taps, attention pools).
    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.named.get(name).copied()
    }

    pub fn named_nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.named
    }

    pub fn needs_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|(n, _)| n == name)
    }

    /// Parameters referenced by this graph, in node order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            })
            .collect()
    }

    /// Number of parameter scalars referenced by the graph.
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&p| store.get(p).tensor.len()).sum()
    }

    /// If `output` is a softmax node, the node holding its logits.
    pub fn logits_of(&self, output: NodeId) -> Option<NodeId> {
        match self.nodes[output].op {
            Op::Softmax { input } => Some(input),
            _ => None,
        }
    }

    /// Structural signature: op kinds, shapes and edges, ignoring labels and
    /// parameter contents.
    pub fn signature(&self) -> Vec<(String, Vec<usize>, Vec<NodeId>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.kind().to_string(), n.shape.clone(), n.op.inputs()))
            .collect()
    }

    fn fetch<'a>(&self, values: &'a [Vec<f64>], store: &'a ParamStore, id: NodeId) -> &'a [f64] {
        match self.nodes[id].op {
            Op::Param(p) => store.get(p).tensor.values(),
            _ => &values[id],
        }
    }

    pub fn forward(&self, store: &ParamStore, feed: &Feed) -> Result<Tape> {
        let n = self.nodes.len();
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        let mut margin = f64::INFINITY;

        for (i, node) in self.nodes.iter().enumerate() {
            let (out, extra) = {
                let v = |j: NodeId| self.fetch(&values, store, j);
                let sh = |j: NodeId| self.nodes[j].shape.as_slice();
                match &node.op {
                    Op::Input { name } => {
                        let t = feed
                            .get(name)
                            .ok_or_else(|| Error::Model(format!("missing input '{name}'")))?;
                        if t.shape() != node.shape.as_slice() {
                            return Err(Error::shape(format!(
                                "input '{name}' expects shape {:?}, got {:?}",
                                node.shape,
                                t.shape()
                            )));
                        }
                        (t.values().to_vec(), Aux::None)
                    }
                    Op::Param(_) => (Vec::new(), Aux::None),
                    Op::EmbedLookup { table, ids, .. } => {
                        let d = sh(*table)[1];
                        let rows = gather_ids(v(*ids), sh(*table)[0])?;
                        let tab = v(*table);
                        let mut out = Vec::with_capacity(rows.len() * d);
                        for r in rows {
                            out.extend_from_slice(&tab[r * d..(r + 1) * d]);
                        }
                        (out, Aux::None)
                    }
                    Op::BagEmbed { table, ids, bags } => {
                        let d = sh(*table)[1];
                        let rows = gather_ids(v(*ids), bags.len())?;
                        let tab = v(*table);
                        let mut out = vec![0.0; rows.len() * d];
                        for (pos, r) in rows.into_iter().enumerate() {
                            let bag = &bags[r];
                            if bag.is_empty() {
                                continue;
                            }
                            let dst = &mut out[pos * d..(pos + 1) * d];
                            for &g in bag {
                                for (o, x) in dst.iter_mut().zip(&tab[g * d..(g + 1) * d]) {
                                    *o += x;
                                }
                            }
                            let inv = 1.0 / bag.len() as f64;
                            dst.iter_mut().for_each(|o| *o *= inv);
                        }
                        (out, Aux::None)
                    }
                    Op::Conv1d {
                        input,
                        filters,
                        bias,
                        stride,
                        activation,
                    } => {
                        let fs = sh(*filters);
                        let (f, h, c) = (fs[0], fs[1], fs[2]);
                        let l_out = node.shape[0];
                        let x = v(*input);
                        let w = v(*filters);
                        let b = v(*bias);
                        let mut out = vec![0.0; l_out * f];
                        let span = h * c;
                        for i in 0..l_out {
                            let window = &x[i * stride * c..i * stride * c + span];
                            for k in 0..f {
                                let wk = &w[k * span..(k + 1) * span];
                                let z = dot(wk, window) + b[k];
                                if *activation == Activation::Relu {
                                    margin = margin.min(z.abs());
                                }
                                out[i * f + k] = activation.apply(z);
                            }
                        }
                        (out, Aux::None)
                    }
                    Op::GlobalMaxPool { input } => {
                        let s = sh(*input);
                        let (out, arg, m) = max_pool(v(*input), s[0], s[1], s[0]);
                        margin = margin.min(m);
                        (out, Aux::Argmax(arg))
                    }
                    Op::WindowedMaxPool { input, window } => {
                        let s = sh(*input);
                        let (out, arg, m) = max_pool(v(*input), s[0], s[1], *window);
                        margin = margin.min(m);
                        (out, Aux::Argmax(arg))
                    }
                    Op::Dense {
                        input,
                        weight,
                        bias,
                        activation,
                    } => {
                        let x = v(*input);
                        let w = v(*weight);
                        let b = v(*bias);
                        let d_in = x.len();
                        let out = (0..node.shape[0])
                            .map(|o| {
                                let z = dot(&w[o * d_in..(o + 1) * d_in], x) + b[o];
                                if *activation == Activation::Relu {
                                    margin = margin.min(z.abs());
                                }
                                activation.apply(z)
                            })
                            .collect();
                        (out, Aux::None)
                    }
                    Op::Softmax { input } => (softmax(v(*input))?, Aux::None),
                    Op::AttentionPool { input, weight, bias } => {
                        let s = sh(*input);
                        let (l, f) = (s[0], s[1]);
                        let hmat = v(*input);
                        let w = v(*weight);
                        let b = v(*bias)[0];
                        let scores: Vec<f64> = (0..l).map(|t| (dot(w, &hmat[t * f..(t + 1) * f]) + b).tanh()).collect();
                        let alphas = softmax(&scores)?;
                        let mut out = vec![0.0; f];
                        for t in 0..l {
                            for (o, x) in out.iter_mut().zip(&hmat[t * f..(t + 1) * f]) {
                                *o += alphas[t] * x;
                            }
                        }
                        (out, Aux::Attention { scores, alphas })
                    }
                    Op::Concat { inputs, axis } => {
                        let parts: Vec<(&[f64], usize)> =
                            inputs.iter().map(|&j| (v(j), inner_extent(sh(j), *axis))).collect();
                        let outer: usize = node.shape[..*axis].iter().product();
                        let mut out = Vec::with_capacity(node.shape.iter().product());
                        for o in 0..outer {
                            for (data, inner) in &parts {
                                out.extend_from_slice(&data[o * inner..(o + 1) * inner]);
                            }
                        }
                        (out, Aux::None)
                    }
                    Op::Flatten { input } => (v(*input).to_vec(), Aux::None),
                    Op::Sum { inputs } => {
                        let mut out = v(inputs[0]).to_vec();
                        for &j in &inputs[1..] {
                            for (o, x) in out.iter_mut().zip(v(j)) {
                                *o += x;
                            }
                        }
                        (out, Aux::None)
                    }
                }
            };
            debug_assert!(
                matches!(node.op, Op::Param(_)) || out.len() == node.shape.iter().product::<usize>(),
                "node {i} ({}) produced {} values for shape {:?}",
                node.label,
                out.len(),
                node.shape
            );
            values.push(out);
            aux.push(extra);
        }

        Ok(Tape {
            values,
            aux,
            kink_margin: margin,
        })
    }

    /// Nodes whose value depends on at least one trainable parameter.
    fn requires_grad(&self, store: &ParamStore) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Param(p) => store.get(*p).tensor.trainable(),
                Op::Input { .. } => false,
                op => op.inputs().iter().any(|&j| needs[j]),
            };
        }
        needs
    }

    /// Propagates `seeds` (upstream gradients at the given nodes) back through
    /// the graph, adding parameter gradients into `store`.
    pub fn backward(&self, store: &mut ParamStore, tape: &Tape, seeds: &[(NodeId, &[f64])]) -> Result<()> {
        let needs = self.requires_grad(store);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(node, seed) in seeds {
            let expected: usize = self.nodes[node].shape.iter().product();
            if seed.len() != expected {
                return Err(Error::shape(format!(
                    "seed for node {node} has {} values, node has {expected}",
                    seed.len()
                )));
            }
            if needs[node] {
                accumulate(&mut grads, node, &self.nodes, seed);
            }
        }

        let values = &tape.values;
        let st: &ParamStore = store;
        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let v = |j: NodeId| self.fetch(values, st, j);
            let sh = |j: NodeId| self.nodes[j].shape.as_slice();
            match &node.op {
                Op::Input { .. } => {}
                Op::Param(_) => {
                    // Parameter leaves keep their gradient until the end.
                    grads[i] = Some(gout);
                }
                Op::EmbedLookup {
                    table,
                    ids,
                    static_padding,
                } => {
                    if needs[*table] {
                        let d = sh(*table)[1];
                        let g = slot(&mut grads, *table, &self.nodes);
                        for (pos, &id) in v(*ids).iter().enumerate() {
                            let r = id as usize;
                            if r == 0 && *static_padding {
                                continue;
                            }
                            for (a, b) in g[r * d..(r + 1) * d].iter_mut().zip(&gout[pos * d..(pos + 1) * d]) {
                                *a += b;
                            }
                        }
                    }
                }
                Op::BagEmbed { table, ids, bags } => {
                    if needs[*table] {
                        let d = sh(*table)[1];
                        let g = slot(&mut grads, *table, &self.nodes);
                        for (pos, &id) in v(*ids).iter().enumerate() {
                            let bag = &bags[id as usize];
                            if bag.is_empty() {
                                continue;
                            }
                            let inv = 1.0 / bag.len() as f64;
                            for &r in bag {
                                for (a, b) in g[r * d..(r + 1) * d].iter_mut().zip(&gout[pos * d..(pos + 1) * d]) {
                                    *a += b * inv;
                                }
                            }
                        }
                    }
                }
                Op::Conv1d {
                    input,
                    filters,
                    bias,
                    stride,
                    activation,
                } => {
                    let fs = sh(*filters);
                    let (f, h, c) = (fs[0], fs[1], fs[2]);
                    let span = h * c;
                    let l_out = node.shape[0];
                    let out = &values[i];
                    let dz: Vec<f64> = gout
                        .iter()
                        .zip(out)
                        .map(|(g, y)| g * activation.derivative_from_output(*y))
                        .collect();
                    let x = v(*input);
                    let w = v(*filters);
                    if needs[*bias] {
                        let gb = slot(&mut grads, *bias, &self.nodes);
                        for i2 in 0..l_out {
                            for k in 0..f {
                                gb[k] += dz[i2 * f + k];
                            }
                        }
                    }
                    if needs[*filters] {
                        let sign = conv_filter_grad_sign();
                        let gw = slot(&mut grads, *filters, &self.nodes);
                        for i2 in 0..l_out {
                            let window = &x[i2 * stride * c..i2 * stride * c + span];
                            for k in 0..f {
                                let g = sign * dz[i2 * f + k];
                                if g != 0.0 {
                                    axpy(g, window, &mut gw[k * span..(k + 1) * span]);
                                }
                            }
                        }
                    }
                    if needs[*input] {
                        let gx = slot(&mut grads, *input, &self.nodes);
                        for i2 in 0..l_out {
                            let base = i2 * stride * c;
                            for k in 0..f {
                                let g = dz[i2 * f + k];
                                if g != 0.0 {
                                    axpy(g, &w[k * span..(k + 1) * span], &mut gx[base..base + span]);
                                }
                            }
                        }
                    }
                }
                Op::GlobalMaxPool { input } | Op::WindowedMaxPool { input, .. } => {
                    if needs[*input] {
                        let Aux::Argmax(arg) = &tape.aux[i] else { unreachable!() };
                        let gx = slot(&mut grads, *input, &self.nodes);
                        for (g, &src) in gout.iter().zip(arg) {
                            gx[src] += g;
                        }
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                    activation,
                } => {
                    let out = &values[i];
                    let dz: Vec<f64> = gout
                        .iter()
                        .zip(out)
                        .map(|(g, y)| g * activation.derivative_from_output(*y))
                        .collect();
                    let x = v(*input);
                    let d_in = x.len();
                    let w = v(*weight);
                    if needs[*bias] {
                        let gb = slot(&mut grads, *bias, &self.nodes);
                        for (a, b) in gb.iter_mut().zip(&dz) {
                            *a += b;
                        }
                    }
                    if needs[*weight] {
                        let gw = slot(&mut grads, *weight, &self.nodes);
                        for (o, &g) in dz.iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, x, &mut gw[o * d_in..(o + 1) * d_in]);
                            }
                        }
                    }
                    if needs[*input] {
                        let gx = slot(&mut grads, *input, &self.nodes);
                        for (o, &g) in dz.iter().enumerate() {
                            if g != 0.0 {
                                axpy(g, &w[o * d_in..(o + 1) * d_in], gx);
                            }
                        }
                    }
                }
                Op::Softmax { input } => {
                    if needs[*input] {
                        let y = &values[i];
                        let s = dot(&gout, y);
                        let gx = slot(&mut grads, *input, &self.nodes);
                        for ((a, g), yk) in gx.iter_mut().zip(&gout).zip(y) {
                            *a += yk * (g - s);
                        }
                    }
                }
                Op::AttentionPool { input, weight, bias } => {
                    let Aux::Attention { scores, alphas } = &tape.aux[i] else {
                        unreachable!()
                    };
                    let s = sh(*input);
                    let (l, f) = (s[0], s[1]);
                    let hmat = v(*input);
                    let w = v(*weight);
                    let dalpha: Vec<f64> = (0..l).map(|t| dot(&gout, &hmat[t * f..(t + 1) * f])).collect();
                    let mean = dot(alphas, &dalpha);
                    let ds: Vec<f64> = (0..l)
                        .map(|t| alphas[t] * (dalpha[t] - mean) * (1.0 - scores[t] * scores[t]))
                        .collect();
                    if needs[*input] {
                        let gh = slot(&mut grads, *input, &self.nodes);
                        for t in 0..l {
                            let row = &mut gh[t * f..(t + 1) * f];
                            axpy(alphas[t], &gout, row);
                            axpy(ds[t], w, row);
                        }
                    }
                    if needs[*weight] {
                        let gw = slot(&mut grads, *weight, &self.nodes);
                        for t in 0..l {
                            axpy(ds[t], &hmat[t * f..(t + 1) * f], gw);
                        }
                    }
                    if needs[*bias] {
                        let gb = slot(&mut grads, *bias, &self.nodes);
                        gb[0] += ds.iter().sum::<f64>();
                    }
                }
                Op::Concat { inputs, axis } => {
                    let outer: usize = node.shape[..*axis].iter().product();
                    let inners: Vec<usize> = inputs.iter().map(|&j| inner_extent(sh(j), *axis)).collect();
                    let row: usize = inners.iter().sum();
                    let mut offset = 0;
                    for (&j, &inner) in inputs.iter().zip(&inners) {
                        if needs[j] {
                            let gx = slot(&mut grads, j, &self.nodes);
                            for o in 0..outer {
                                let src = &gout[o * row + offset..o * row + offset + inner];
                                for (a, b) in gx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *a += b;
                                }
                            }
                        }
                        offset += inner;
                    }
                }
                Op::Flatten { input } => {
                    if needs[*input] {
                        accumulate(&mut grads, *input, &self.nodes, &gout);
                    }
                }
                Op::Sum { inputs } => {
                    for &j in inputs {
                        if needs[j] {
                            accumulate(&mut grads, j, &self.nodes, &gout);
                        }
                    }
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, grads[i].as_ref()) {
                let dst = store.get_mut(*p).tensor.grad_mut();
                for (a, b) in dst.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], j: NodeId, nodes: &[Node]) -> &'a mut Vec<f64> {
    grads[j].get_or_insert_with(|| vec![0.0; nodes[j].shape.iter().product()])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], j: NodeId, nodes: &[Node], g: &[f64]) {
    let dst = slot(grads, j, nodes);
    for (a, b) in dst.iter_mut().zip(g) {
        *a += b;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn inner_extent(shape: &[usize], axis: usize) -> usize {
    shape[axis..].iter().product()
}

fn gather_ids(ids: &[f64], bound: usize) -> Result<Vec<usize>> {
    ids.iter()
        .enumerate()
        .map(|(position, &x)| {
            if x < 0.0 || x.fract() != 0.0 || x >= bound as f64 {
                Err(Error::IndexOutOfRange {
                    position,
                    index: if x < 0.0 { usize::MAX } else { x as usize },
                    bound,
                })
            } else {
                Ok(x as usize)
            }
        })
        .collect()
}

/// Column-wise max over non-overlapping windows of `window` rows. Returns the
/// pooled values, the flat source offset of each, and the smallest top-two gap.
fn max_pool(x: &[f64], rows: usize, cols: usize, window: usize) -> (Vec<f64>, Vec<usize>, f64) {
    let out_rows = rows.div_ceil(window);
    let mut out = Vec::with_capacity(out_rows * cols);
    let mut arg = Vec::with_capacity(out_rows * cols);
    let mut margin = f64::INFINITY;
    for w in 0..out_rows {
        let start = w * window;
        let end = (start + window).min(rows);
        for c in 0..cols {
            let mut best = start;
            let mut top = x[start * cols + c];
            let mut second = f64::NEG_INFINITY;
            for r in start + 1..end {
                let val = x[r * cols + c];
                if val > top {
                    second = top;
                    top = val;
                    best = r;
                } else if val < top && val > second {
                    second = val;
                }
            }
            // exact ties come from identical inputs and move together
            if second.is_finite() {
                margin = margin.min(top - second);
            }
            out.push(top);
            arg.push(best * cols + c);
        }
    }
    (out, arg, margin)
}

/// Numerically stable softmax. Non-finite logits are rejected.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax over zero classes"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Incremental graph construction with shape checking.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, label: impl Into<String>) -> NodeId {
        self.graph.nodes.push(Node {
            op,
            shape,
            label: label.into(),
        });
        self.graph.nodes.len() - 1
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.graph.nodes[id].shape
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        if let Some((_, id)) = self.graph.inputs.iter().find(|(n, _)| n == name) {
            return *id;
        }
        let id = self.push(Op::Input { name: name.to_string() }, shape, name);
        self.graph.inputs.push((name.to_string(), id));
        id
    }

    /// Leaf node for a stored parameter. Reuses the node if already present.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(pos) = self
            .graph
            .nodes
            .iter()
            .position(|n| matches!(n.op, Op::Param(p) if p == id))
        {
            return pos;
        }
        let p = store.get(id);
        self.push(Op::Param(id), p.tensor.shape().to_vec(), p.name.clone())
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: NodeId, static_padding: bool) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        let is = self.shape(ids).to_vec();
        if ts.len() != 2 || is.len() != 1 {
            return Err(Error::shape(format!("embed_lookup: table {ts:?}, ids {is:?}")));
        }
        Ok(self.push(
            Op::EmbedLookup {
                table,
                ids,
                static_padding,
            },
            vec![is[0], ts[1]],
            "embed",
        ))
    }

    pub fn bag_embed(&mut self, table: NodeId, ids: NodeId, bags: Arc<Vec<Vec<usize>>>) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        let is = self.shape(ids).to_vec();
        if ts.len() != 2 || is.len() != 1 {
            return Err(Error::shape(format!("bag_embed: table {ts:?}, ids {is:?}")));
        }
        if bags.iter().flatten().any(|&r| r >= ts[0]) {
            return Err(Error::shape("bag_embed: bag refers past the table"));
        }
        Ok(self.push(Op::BagEmbed { table, ids, bags }, vec![is[0], ts[1]], "bag_embed"))
    }

    pub fn conv1d(
        &mut self,
        input: NodeId,
        filters: NodeId,
        bias: NodeId,
        stride: usize,
        activation: Activation,
        label: &str,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let fs = self.shape(filters).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || fs.len() != 3 || fs[2] != xs[1] || bs != [fs[0]] {
            return Err(Error::shape(format!(
                "{label}: input {xs:?}, filters {fs:?}, bias {bs:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape(format!("{label}: stride must be positive")));
        }
        let (l, h) = (xs[0], fs[1]);
        if l < h {
            return Err(Error::shape(format!(
                "{label}: sequence length {l} is shorter than window {h}"
            )));
        }
        let l_out = (l - h) / stride + 1;
        Ok(self.push(
            Op::Conv1d {
                input,
                filters,
                bias,
                stride,
                activation,
            },
            vec![l_out, fs[0]],
            label,
        ))
    }

    pub fn global_maxpool(&mut self, input: NodeId, label: &str) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape(format!("{label}: global max pool over {s:?}")));
        }
        Ok(self.push(Op::GlobalMaxPool { input }, vec![s[1]], label))
    }

    pub fn windowed_maxpool(&mut self, input: NodeId, window: usize, label: &str) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if window == 0 {
            return Err(Error::shape(format!("{label}: pool window must be >= 1")));
        }
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::shape(format!("{label}: max pool over {s:?}")));
        }
        Ok(self.push(
            Op::WindowedMaxPool { input, window },
            vec![s[0].div_ceil(window), s[1]],
            label,
        ))
    }

    pub fn dense(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        activation: Activation,
        label: &str,
    ) -> Result<NodeId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(Error::shape(format!(
                "{label}: input {xs:?} does not fit weight {ws:?} / bias {bs:?}"
            )));
        }
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
                activation,
            },
            vec![ws[0]],
            label,
        ))
    }

    pub fn softmax(&mut self, input: NodeId, label: &str) -> Result<NodeId> {
        let s = self.shape(input).to_vec();
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::shape(format!("{label}: softmax over {s:?}")));
        }
        Ok(self.push(Op::Softmax { input }, s, label))
    }

    pub fn attention_pool(&mut self, input: NodeId, weight: NodeId, bias: NodeId, label: &str) -> Result<NodeId> {
        let hs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if hs.len() != 2 || hs[0] == 0 || ws != [hs[1]] || bs != [1] {
            return Err(Error::shape(format!(
                "{label}: attention over {hs:?} with weight {ws:?}, bias {bs:?}"
            )));
        }
        Ok(self.push(Op::AttentionPool { input, weight, bias }, vec![hs[1]], label))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize, label: &str) -> Result<NodeId> {
        let first = inputs
            .first()
            .map(|&j| self.shape(j).to_vec())
            .ok_or_else(|| Error::shape(format!("{label}: concat of nothing")))?;
        if axis >= first.len() {
            return Err(Error::shape(format!("{label}: axis {axis} for rank {}", first.len())));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &j in inputs {
            let s = self.shape(j);
            let agree =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !agree {
                return Err(Error::shape(format!(
                    "{label}: cannot concat {s:?} with {first:?} along axis {axis}"
                )));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            label,
        ))
    }

    pub fn flatten(&mut self, input: NodeId, label: &str) -> NodeId {
        let n = self.shape(input).iter().product();
        self.push(Op::Flatten { input }, vec![n], label)
    }

    pub fn sum(&mut self, inputs: &[NodeId], label: &str) -> Result<NodeId> {
        let first = inputs
            .first()
            .map(|&j| self.shape(j).to_vec())
            .ok_or_else(|| Error::shape(format!("{label}: sum of nothing")))?;
        if let Some(&bad) = inputs.iter().find(|&&j| self.shape(j) != first.as_slice()) {
            return Err(Error::shape(format!(
                "{label}: cannot add {:?} to {first:?}",
                self.shape(bad)
            )));
        }
        Ok(self.push(
            Op::Sum {
                inputs: inputs.to_vec(),
            },
            first,
            label,
        ))
    }

    pub fn name(&mut self, name: impl Into<String>, node: NodeId) {
        self.graph.named.insert(name.into(), node);
    }

    pub fn mark_output(&mut self, node: NodeId) -> usize {
        self.graph.outputs.push(node);
        self.graph.outputs.len() - 1
    }

    pub fn finish(self) -> Graph {
        self.graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = entries
            .iter()
            .map(|(n, t)| store.add(*n, t.clone().with_trainable(true)).unwrap())
            .collect();
        (store, ids)
    }

    fn ids(v: &[usize]) -> Tensor {
        Tensor::vector(v.iter().map(|&x| x as f64).collect())
    }

    #[test]
    fn embed_lookup_selects_rows() {
        let table = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (store, p) = store_with(&[("t", table)]);
        let mut b = GraphBuilder::new();
        let x = b.input("ids", vec![3]);
        let t = b.param(&store, p[0]);
        let e = b.embed_lookup(t, x, false).unwrap();
        b.mark_output(e);
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new().with("ids", ids(&[1, 0, 1]))).unwrap();
        assert_eq!(tape.value(e), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn embed_lookup_empty_sequence() {
        let table = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (store, p) = store_with(&[("t", table)]);
        let mut b = GraphBuilder::new();
        let x = b.input("ids", vec![0]);
        let t = b.param(&store, p[0]);
        let e = b.embed_lookup(t, x, false).unwrap();
        assert_eq!(b.shape(e), &[0, 2]);
        let g = b.finish();
        let tape = g
            .forward(&store, &Feed::new().with("ids", Tensor::zeros(vec![0])))
            .unwrap();
        assert!(tape.value(e).is_empty());
    }

    #[test]
    fn embed_lookup_accumulates_duplicate_rows() {
        let table = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (mut store, p) = store_with(&[("t", table)]);
        let mut b = GraphBuilder::new();
        let x = b.input("ids", vec![3]);
        let t = b.param(&store, p[0]);
        let e = b.embed_lookup(t, x, false).unwrap();
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new().with("ids", ids(&[1, 0, 1]))).unwrap();
        g.backward(&mut store, &tape, &[(e, &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0])])
            .unwrap();
        let grad = store.get(p[0]).tensor.grad().unwrap();
        assert_eq!(&grad[2..4], &[3.0, 3.0]);
        assert_eq!(&grad[0..2], &[0.0, 0.0]);
    }

    #[test]
    fn static_padding_row_gets_no_gradient() {
        let table = Tensor::matrix(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let (mut store, p) = store_with(&[("t", table)]);
        let mut b = GraphBuilder::new();
        let x = b.input("ids", vec![2]);
        let t = b.param(&store, p[0]);
        let e = b.embed_lookup(t, x, true).unwrap();
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new().with("ids", ids(&[0, 1]))).unwrap();
        g.backward(&mut store, &tape, &[(e, &[5.0, 5.0, 1.0, 1.0])]).unwrap();
        assert_eq!(store.get(p[0]).tensor.grad().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn embed_lookup_rejects_out_of_range_with_position() {
        let table = Tensor::matrix(&[vec![1.0], vec![2.0]]).unwrap();
        let (store, p) = store_with(&[("t", table)]);
        let mut b = GraphBuilder::new();
        let x = b.input("ids", vec![3]);
        let t = b.param(&store, p[0]);
        b.embed_lookup(t, x, false).unwrap();
        let g = b.finish();
        let err = g
            .forward(&store, &Feed::new().with("ids", ids(&[0, 1, 7])))
            .unwrap_err();
        match err {
            Error::IndexOutOfRange { position, index, bound } => {
                assert_eq!((position, index, bound), (2, 7, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn conv_graph(input: Tensor, filters: Tensor, stride: usize, act: Activation) -> (Vec<f64>, Vec<usize>) {
        let f = filters.shape()[0];
        let (store, p) = store_with(&[("w", filters), ("b", Tensor::zeros(vec![f]))]);
        let mut b = GraphBuilder::new();
        let x = b.input("x", input.shape().to_vec());
        let w = b.param(&store, p[0]);
        let bias = b.param(&store, p[1]);
        let c = b.conv1d(x, w, bias, stride, act, "conv").unwrap();
        let shape = b.shape(c).to_vec();
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new().with("x", input)).unwrap();
        (tape.value(c).to_vec(), shape)
    }

    #[test]
    fn conv1d_difference_filter_with_relu() {
        let input = Tensor::matrix(&[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
        let filters = Tensor::new(vec![1, 2, 1], vec![1.0, -1.0]).unwrap();
        let (out, shape) = conv_graph(input, filters, 1, Activation::Relu);
        assert_eq!(shape, vec![2, 1]);
        assert_eq!(out, vec![2.0, 0.0]);
    }

    #[test]
    fn conv1d_identity_filter() {
        let input = Tensor::matrix(&[vec![0.5], vec![-1.5], vec![2.0]]).unwrap();
        let filters = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let (out, _) = conv_graph(input.clone(), filters, 1, Activation::Identity);
        assert_eq!(out, input.values());
    }

    #[test]
    fn conv1d_stride_windows_match_naive_oracle() {
        let input = Tensor::new(vec![9, 1], (0..9).map(|x| x as f64).collect()).unwrap();
        let filters = Tensor::new(vec![1, 4, 1], vec![1.0, 10.0, 100.0, 1000.0]).unwrap();
        let (out, shape) = conv_graph(input.clone(), filters.clone(), 4, Activation::Identity);
        assert_eq!(shape, vec![2, 1]);
        // naive: every start offset that is a multiple of the stride and fits
        let naive: Vec<f64> = (0..9)
            .step_by(4)
            .filter(|s| s + 4 <= 9)
            .map(|s| (0..4).map(|k| input.values()[s + k] * filters.values()[k]).sum())
            .collect();
        assert_eq!(out, naive);
    }

    #[test]
    fn conv1d_rejects_short_sequence() {
        let (store, p) = store_with(&[("w", Tensor::zeros(vec![1, 4, 1])), ("b", Tensor::zeros(vec![1]))]);
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![3, 1]);
        let w = b.param(&store, p[0]);
        let bias = b.param(&store, p[1]);
        let err = b.conv1d(x, w, bias, 1, Activation::Relu, "conv").unwrap_err();
        assert!(err.to_string().contains("shorter than window"));
    }

    fn pool(input: Tensor, window: Option<usize>) -> (ParamStore, Graph, Tape, NodeId, ParamId) {
        let (store, p) = store_with(&[("x", input.clone())]);
        let mut b = GraphBuilder::new();
        let x = b.param(&store, p[0]);
        let out = match window {
            None => b.global_maxpool(x, "pool").unwrap(),
            Some(w) => b.windowed_maxpool(x, w, "pool").unwrap(),
        };
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new()).unwrap();
        (store, g, tape, out, p[0])
    }

    #[test]
    fn global_maxpool_columnwise() {
        let (_, _, tape, out, _) = pool(Tensor::matrix(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap(), None);
        assert_eq!(tape.value(out), &[3.0, 5.0]);
        let (_, _, tape, out, _) = pool(Tensor::matrix(&[vec![7.0, -1.0]]).unwrap(), None);
        assert_eq!(tape.value(out), &[7.0, -1.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_row() {
        let (mut store, g, tape, out, p) = pool(Tensor::matrix(&[vec![2.0, 0.0], vec![2.0, 0.0]]).unwrap(), None);
        g.backward(&mut store, &tape, &[(out, &[1.0, 1.0])]).unwrap();
        assert_eq!(store.get(p).tensor.grad().unwrap(), &[1.0, 1.0, 0.0, 0.0]);
        // A one-sided perturbation of row 1 changes nothing until it wins.
        let mut bumped = store.clone();
        bumped.get_mut(p).tensor.values_mut()[2] -= 1e-6;
        let t2 = g.forward(&bumped, &Feed::new()).unwrap();
        assert_eq!(t2.value(out), tape.value(out));
    }

    #[test]
    fn windowed_maxpool_partial_last_window() {
        let (_, _, tape, out, _) = pool(Tensor::new(vec![4, 1], vec![1.0, 4.0, 2.0, 5.0]).unwrap(), Some(3));
        assert_eq!(tape.value(out), &[4.0, 5.0]);
        let (_, g, _, out, _) = pool(Tensor::zeros(vec![6, 2]), Some(3));
        assert_eq!(g.node(out).shape, vec![2, 2]);
    }

    #[test]
    fn windowed_maxpool_wide_window_equals_global() {
        let x = Tensor::matrix(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![0.0, 9.0]]).unwrap();
        let (_, _, a, oa, _) = pool(x.clone(), Some(10));
        let (_, _, b, ob, _) = pool(x, None);
        assert_eq!(a.value(oa), b.value(ob));
    }

    #[test]
    fn windowed_maxpool_rejects_zero_window() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![3, 1]);
        assert!(b.windowed_maxpool(x, 0, "pool").is_err());
    }

    fn dense_out(w: Tensor, bias: Vec<f64>, x: Vec<f64>, act: Activation) -> Vec<f64> {
        let n = x.len();
        let (store, p) = store_with(&[("w", w), ("b", Tensor::vector(bias))]);
        let mut b = GraphBuilder::new();
        let input = b.input("x", vec![n]);
        let wn = b.param(&store, p[0]);
        let bn = b.param(&store, p[1]);
        let out = b.dense(input, wn, bn, act, "dense").unwrap();
        let g = b.finish();
        g.forward(&store, &Feed::new().with("x", Tensor::vector(x)))
            .unwrap()
            .value(out)
            .to_vec()
    }

    #[test]
    fn dense_examples() {
        let eye = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(
            dense_out(eye, vec![0.0, 0.0], vec![0.3, -2.0], Activation::Identity),
            vec![0.3, -2.0]
        );
        let w = Tensor::matrix(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(dense_out(w, vec![0.5], vec![1.0, 2.0], Activation::Identity), vec![3.5]);
        let w = Tensor::matrix(&[vec![-1.0]]).unwrap();
        assert_eq!(dense_out(w, vec![0.0], vec![2.0], Activation::Relu), vec![0.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let (store, p) = store_with(&[("w", Tensor::zeros(vec![2, 3])), ("b", Tensor::zeros(vec![2]))]);
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![4]);
        let w = b.param(&store, p[0]);
        let bias = b.param(&store, p[1]);
        let msg = b.dense(x, w, bias, Activation::Relu, "dense").unwrap_err().to_string();
        assert!(msg.contains("[4]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    fn attention(h: Tensor, w: Vec<f64>, bias: f64) -> (Vec<f64>, Vec<f64>) {
        let (store, p) = store_with(&[("h", h), ("w", Tensor::vector(w)), ("b", Tensor::scalar(bias))]);
        let mut b = GraphBuilder::new();
        let hn = b.param(&store, p[0]);
        let wn = b.param(&store, p[1]);
        let bn = b.param(&store, p[2]);
        let out = b.attention_pool(hn, wn, bn, "att").unwrap();
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new()).unwrap();
        (tape.value(out).to_vec(), tape.alphas(out).unwrap().to_vec())
    }

    #[test]
    fn attention_identical_rows_returns_that_row() {
        let h = Tensor::matrix(&[vec![1.5, -2.0], vec![1.5, -2.0], vec![1.5, -2.0]]).unwrap();
        let (out, alphas) = attention(h, vec![3.0, 0.7], 0.2);
        assert!((out[0] - 1.5).abs() < 1e-12 && (out[1] + 2.0).abs() < 1e-12);
        assert!((alphas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_zero_weight_is_mean() {
        let h = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let (out, alphas) = attention(h, vec![0.0, 0.0], 0.0);
        assert_eq!(alphas, vec![0.5, 0.5]);
        assert_eq!(out, vec![2.0, 4.0]);
    }

    #[test]
    fn attention_weights_follow_tanh_then_softmax() {
        // Scores s = w·h_t + b chosen so e = tanh(s) differ by ln 2.
        let e0 = 0.5f64;
        let e1 = e0 - 2f64.ln();
        let h = Tensor::matrix(&[vec![e0.atanh()], vec![e1.atanh()]]).unwrap();
        let (_, alphas) = attention(h, vec![1.0], 0.0);
        let oracle = softmax(&[e0, e1]).unwrap();
        assert!((alphas[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((alphas[0] - oracle[0]).abs() < 1e-15);
    }

    #[test]
    fn concat_forward_and_gradient_split() {
        let (mut store, p) = store_with(&[("a", Tensor::vector(vec![1.0, 2.0])), ("b", Tensor::vector(vec![3.0]))]);
        let mut b = GraphBuilder::new();
        let a = b.param(&store, p[0]);
        let c = b.param(&store, p[1]);
        let out = b.concat(&[a, c], 0, "cat").unwrap();
        let single = b.concat(&[a], 0, "one").unwrap();
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new()).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(single), &[1.0, 2.0]);
        g.backward(&mut store, &tape, &[(out, &[0.1, 0.2, 0.3])]).unwrap();
        assert_eq!(store.get(p[0]).tensor.grad().unwrap(), &[0.1, 0.2]);
        assert_eq!(store.get(p[1]).tensor.grad().unwrap(), &[0.3]);
    }

    #[test]
    fn concat_columns_and_mismatch() {
        let (store, p) = store_with(&[
            ("a", Tensor::matrix(&[vec![1.0], vec![2.0]]).unwrap()),
            ("b", Tensor::matrix(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap()),
            ("c", Tensor::matrix(&[vec![3.0, 4.0]]).unwrap()),
        ]);
        let mut b = GraphBuilder::new();
        let a = b.param(&store, p[0]);
        let bb = b.param(&store, p[1]);
        let c = b.param(&store, p[2]);
        let out = b.concat(&[a, bb], 1, "cat").unwrap();
        assert!(b.concat(&[a, c], 1, "bad").is_err());
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new()).unwrap();
        assert_eq!(tape.value(out), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn frozen_params_collect_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(&[vec![2.0]]).unwrap()).unwrap();
        let bias = store.add("b", Tensor::vector(vec![0.0]).with_trainable(true)).unwrap();
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![1]);
        let wn = b.param(&store, w);
        let bn = b.param(&store, bias);
        let out = b.dense(x, wn, bn, Activation::Identity, "d").unwrap();
        let g = b.finish();
        let tape = g.forward(&store, &Feed::new().with("x", Tensor::scalar(1.0))).unwrap();
        g.backward(&mut store, &tape, &[(out, &[1.0])]).unwrap();
        assert!(store.get(w).tensor.grad().is_none());
        assert_eq!(store.get(bias).tensor.grad().unwrap(), &[1.0]);
    }
}
