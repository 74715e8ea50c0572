//! Graph construction for the ten model variants.
//!
//! Parameter names are scoped: `conv3.w`, `out.b`, `snn/conv4.w`,
//! `hate/conv5.w`. A parameter's initial value depends only on the builder
//! seed and its name inside the current prefix, so a soft-shared subnet
//! built under prefix `task/` starts from the same weights as a standalone
//! network built with the same seed.

mod shared;
mod soft;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EncodedExample, CHAR_ALPHABET};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, GraphBuilder, NodeId, Tape};
use crate::params::ParamStore;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub use shared::{build_concat_model, build_shared_network, derive_task_head, DerivedHead, SharedNetwork};
pub use soft::{build_soft_shared, cross_transform_count, SoftSharedNetwork};

/// Name of the static input-vector table parameter.
pub const EMBED_TABLE: &str = "embed.table";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCnnSpec {
    pub windows: Vec<usize>,
    pub filters: usize,
    /// Dense relu layers after pooling; each is one more soft-sharing level.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl Default for WordCnnSpec {
    fn default() -> Self {
        WordCnnSpec {
            windows: vec![3, 4, 5],
            filters: 100,
            hidden: Vec::new(),
        }
    }
}

impl WordCnnSpec {
    pub fn pooled_width(&self) -> usize {
        self.windows.len() * self.filters
    }

    /// Width after the last hidden layer.
    pub fn feature_width(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.pooled_width())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharCnnSpec {
    pub kernel: usize,
    pub strides: [usize; 2],
    pub pool: usize,
    pub filters: usize,
    pub hidden: usize,
}

impl Default for CharCnnSpec {
    fn default() -> Self {
        CharCnnSpec {
            kernel: 4,
            strides: [4, 2],
            pool: 3,
            filters: 256,
            hidden: 64,
        }
    }
}

impl CharCnnSpec {
    /// Sequence lengths after conv1, pool1, conv2 and pool2.
    pub fn lengths(&self, char_len: usize) -> Result<[usize; 4]> {
        let conv = |l: usize, s: usize, layer: &str| {
            if l < self.kernel {
                Err(Error::Model(format!(
                    "char {layer}: input length {l} is shorter than kernel {}",
                    self.kernel
                )))
            } else {
                Ok((l - self.kernel) / s + 1)
            }
        };
        if self.pool == 0 || self.strides.contains(&0) {
            return Err(Error::Model("char pool and strides must be positive".into()));
        }
        let c1 = conv(char_len, self.strides[0], "conv1")?;
        let p1 = c1.div_ceil(self.pool);
        let c2 = conv(p1, self.strides[1], "conv2")?;
        let p2 = c2.div_ceil(self.pool);
        Ok([c1, p1, c2, p2])
    }

    pub fn flat_width(&self, char_len: usize) -> Result<usize> {
        Ok(self.lengths(char_len)?[3] * self.filters)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    RandomStatic,
    PretrainedStatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Word,
    Char,
    Hybrid,
    Attention,
}

/// Input sizes and layer settings shared by every builder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub seq_len: usize,
    pub char_len: usize,
    pub word: WordCnnSpec,
    pub char: CharCnnSpec,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            seq_len: 100,
            char_len: 256,
            word: WordCnnSpec::default(),
            char: CharCnnSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: Vec<String>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, labels: &[&str]) -> Self {
        TaskSpec {
            name: name.into(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }
}

/// Declarative description of one model, echoed next to saved weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: u8,
    pub net: NetConfig,
    pub tasks: Vec<TaskSpec>,
    pub init: InitMode,
    #[serde(default)]
    pub trainable_subwords: bool,
}

impl ModelSpec {
    pub fn architecture(&self) -> Architecture {
        match self.variant {
            3 => Architecture::Char,
            4 => Architecture::Hybrid,
            5 => Architecture::Attention,
            _ => Architecture::Word,
        }
    }

    pub fn is_multitask(&self) -> bool {
        self.variant >= 6
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=10).contains(&self.variant) {
            return Err(Error::Config(format!("variant must be 1..=10, got {}", self.variant)));
        }
        if self.variant == 1 && self.init != InitMode::RandomStatic {
            return Err(Error::Config("variant 1 uses random static vectors".into()));
        }
        if self.is_multitask() && self.tasks.len() < 2 {
            return Err(Error::Config(format!(
                "variant {} needs at least two tasks, got {}",
                self.variant,
                self.tasks.len()
            )));
        }
        if self.tasks.iter().any(|t| t.classes() < 2) {
            return Err(Error::Config("every task needs at least two classes".into()));
        }
        let mut names: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("task names must be unique".into()));
        }
        if self.net.word.windows.is_empty() || self.net.word.filters == 0 {
            return Err(Error::Config(
                "word CNN needs at least one window and one filter".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable subword composition: each vocabulary row's n-gram rows in a
/// trainable table, averaged on the fly.
#[derive(Clone, Debug)]
pub struct SubwordInput {
    pub table: Tensor,
    pub bags: Arc<Vec<Vec<usize>>>,
}

/// What the word channel reads: a static table, optionally widened by a
/// trainable subword half.
#[derive(Clone, Debug)]
pub struct EmbeddingInput {
    pub table: Tensor,
    pub subword: Option<SubwordInput>,
}

impl EmbeddingInput {
    pub fn fixed(table: Tensor) -> Self {
        EmbeddingInput { table, subword: None }
    }

    pub fn dim(&self) -> usize {
        self.table.cols() + self.subword.as_ref().map_or(0, |s| s.table.cols())
    }
}

/// A task's view of a graph output. Labels occupy slots
/// `offset..offset + classes` of that output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Head {
    pub task: String,
    pub output: NodeId,
    pub offset: usize,
    pub classes: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub graph: Graph,
    pub heads: Vec<Head>,
}

impl Model {
    pub fn head_index(&self, task: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.task == task)
    }

    /// Probabilities over the head's own slots, renormalised when the head
    /// covers only part of a merged output.
    pub fn probabilities(&self, tape: &Tape, head: usize) -> Vec<f64> {
        let h = &self.heads[head];
        let p = &tape.value(h.output)[h.offset..h.offset + h.classes];
        if h.offset == 0 && h.classes == tape.value(h.output).len() {
            return p.to_vec();
        }
        let total: f64 = p.iter().sum();
        p.iter().map(|x| x / total).collect()
    }

    pub fn predict(&self, store: &ParamStore, example: &EncodedExample, head: usize) -> Result<Vec<f64>> {
        let tape = self.graph.forward(store, &example.feed(&self.graph))?;
        Ok(self.probabilities(&tape, head))
    }

    /// Attention weights of every attention pool, by node name.
    pub fn attention(&self, tape: &Tape) -> Vec<(String, Vec<f64>)> {
        self.graph
            .named_nodes()
            .iter()
            .filter(|(n, _)| n.starts_with("attention"))
            .filter_map(|(n, &id)| tape.alphas(id).map(|a| (n.clone(), a.to_vec())))
            .collect()
    }
}

/// Builder state: a parameter store, a graph under construction, a name
/// prefix and the seed for initial values.
pub struct Ctx<'s> {
    pub store: &'s mut ParamStore,
    pub builder: GraphBuilder,
    prefix: String,
    seed: u64,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Ctx {
            store,
            builder: GraphBuilder::new(),
            prefix: String::new(),
            seed,
        }
    }

    pub fn set_scope(&mut self, prefix: &str, seed: u64) {
        self.prefix = prefix.to_string();
        self.seed = seed;
    }

    fn full(&self, local: &str) -> String {
        format!("{}{local}", self.prefix)
    }

    fn add_or_reuse(&mut self, name: String, make: impl FnOnce() -> Tensor) -> Result<NodeId> {
        let id = match self.store.id(&name) {
            Some(id) => id,
            None => self.store.add(name.clone(), make())?,
        };
        Ok(self.builder.param(self.store, id))
    }

    /// Glorot-uniform trainable weight.
    pub fn glorot(&mut self, local: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Result<NodeId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = rng_for(self.seed, &format!("init/{local}"));
        let n: usize = shape.iter().product();
        let name = self.full(local);
        self.add_or_reuse(name, || {
            let values = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
            Tensor::new(shape, values).expect("sized above").with_trainable(true)
        })
    }

    pub fn zeros(&mut self, local: &str, shape: Vec<usize>) -> Result<NodeId> {
        let name = self.full(local);
        self.add_or_reuse(name, || Tensor::zeros(shape).with_trainable(true))
    }

    /// A parameter with given contents, stored under an unprefixed name.
    pub fn fixed(&mut self, name: &str, tensor: &Tensor, trainable: bool) -> Result<NodeId> {
        let node = self.add_or_reuse(name.to_string(), || tensor.clone().with_trainable(trainable))?;
        let existing = self.store.by_name(name).expect("just added");
        if existing.tensor.shape() != tensor.shape() {
            return Err(Error::Model(format!(
                "'{name}' already holds shape {:?}, wanted {:?}",
                existing.tensor.shape(),
                tensor.shape()
            )));
        }
        Ok(node)
    }

    pub fn dense(&mut self, x: NodeId, out: usize, act: Activation, local: &str) -> Result<NodeId> {
        let width = self.builder.shape(x)[0];
        let w = self.glorot(&format!("{local}.w"), vec![out, width], width, out)?;
        let b = self.zeros(&format!("{local}.b"), vec![out])?;
        let label = self.full(local);
        self.builder.dense(x, w, b, act, &label)
    }

    /// Dense layer to `classes` logits followed by softmax.
    pub fn head(&mut self, x: NodeId, classes: usize, local: &str) -> Result<NodeId> {
        let logits = self.dense(x, classes, Activation::Identity, local)?;
        let label = self.full(&format!("{local}.softmax"));
        self.builder.softmax(logits, &label)
    }

    pub fn finish(self) -> Graph {
        self.builder.finish()
    }
}

/// Token input through the static table, plus the trainable subword half
/// when present (named `<scope>embed.subword`).
pub fn embed_tokens(ctx: &mut Ctx, input: &EmbeddingInput, seq_len: usize, scope: &str) -> Result<NodeId> {
    let tokens = ctx.builder.input("tokens", vec![seq_len]);
    let table = ctx.fixed(EMBED_TABLE, &input.table, false)?;
    let words = ctx.builder.embed_lookup(table, tokens, true)?;
    match &input.subword {
        None => Ok(words),
        Some(sub) => {
            let name = ctx.full(&format!("{scope}embed.subword"));
            let t = ctx.fixed(&name, &sub.table, true)?;
            let bag = ctx.builder.bag_embed(t, tokens, sub.bags.clone())?;
            ctx.builder.concat(&[words, bag], 1, "embed.concat")
        }
    }
}

/// Per-window conv + pooling, concatenated. Registers `<scope>features`
/// and, with attention, `<scope>attention<h>` nodes.
pub fn word_trunk(ctx: &mut Ctx, embedded: NodeId, spec: &WordCnnSpec, attention: bool, scope: &str) -> Result<NodeId> {
    let d = ctx.builder.shape(embedded)[1];
    let f = spec.filters;
    let mut pooled = Vec::with_capacity(spec.windows.len());
    for &h in &spec.windows {
        let w = ctx.glorot(&format!("{scope}conv{h}.w"), vec![f, h, d], h * d, h * f)?;
        let b = ctx.zeros(&format!("{scope}conv{h}.b"), vec![f])?;
        let label = ctx.full(&format!("{scope}conv{h}"));
        let c = ctx.builder.conv1d(embedded, w, b, 1, Activation::Relu, &label)?;
        let p = if attention {
            let aw = ctx.glorot(&format!("{scope}att{h}.w"), vec![f], f, 1)?;
            let ab = ctx.zeros(&format!("{scope}att{h}.b"), vec![1])?;
            let label = ctx.full(&format!("{scope}attention{h}"));
            let p = ctx.builder.attention_pool(c, aw, ab, &label)?;
            ctx.builder.name(label, p);
            p
        } else {
            let label = ctx.full(&format!("{scope}pool{h}"));
            ctx.builder.global_maxpool(c, &label)?
        };
        pooled.push(p);
    }
    let label = ctx.full(&format!("{scope}features"));
    let features = if pooled.len() == 1 {
        pooled[0]
    } else {
        ctx.builder.concat(&pooled, 0, &label)?
    };
    ctx.builder.name(label, features);
    Ok(features)
}

/// Character channel up to the flattened pool output.
pub fn char_trunk(ctx: &mut Ctx, spec: &CharCnnSpec, char_len: usize, scope: &str) -> Result<NodeId> {
    spec.lengths(char_len)?;
    let chars = ctx.builder.input("chars", vec![char_len, CHAR_ALPHABET]);
    let (k, f) = (spec.kernel, spec.filters);
    let w1 = ctx.glorot(
        &format!("{scope}char.conv1.w"),
        vec![f, k, CHAR_ALPHABET],
        k * CHAR_ALPHABET,
        k * f,
    )?;
    let b1 = ctx.zeros(&format!("{scope}char.conv1.b"), vec![f])?;
    let c1 = ctx
        .builder
        .conv1d(chars, w1, b1, spec.strides[0], Activation::Relu, "char.conv1")?;
    let p1 = ctx.builder.windowed_maxpool(c1, spec.pool, "char.pool1")?;
    let w2 = ctx.glorot(&format!("{scope}char.conv2.w"), vec![f, k, f], k * f, k * f)?;
    let b2 = ctx.zeros(&format!("{scope}char.conv2.b"), vec![f])?;
    let c2 = ctx
        .builder
        .conv1d(p1, w2, b2, spec.strides[1], Activation::Relu, "char.conv2")?;
    let p2 = ctx.builder.windowed_maxpool(c2, spec.pool, "char.pool2")?;
    let flat = ctx.builder.flatten(p2, "char.flatten");
    ctx.builder.name(ctx.full(&format!("{scope}char.features")), flat);
    Ok(flat)
}

fn finish_single(mut ctx: Ctx, out: NodeId, task: &TaskSpec) -> Model {
    ctx.builder.mark_output(out);
    Model {
        graph: ctx.finish(),
        heads: vec![Head {
            task: task.name.clone(),
            output: out,
            offset: 0,
            classes: task.classes(),
        }],
    }
}

fn word_model(
    net: &NetConfig,
    input: &EmbeddingInput,
    task: &TaskSpec,
    store: &mut ParamStore,
    seed: u64,
    attention: bool,
) -> Result<Model> {
    let mut ctx = Ctx::new(store, seed);
    let e = embed_tokens(&mut ctx, input, net.seq_len, "")?;
    let mut x = word_trunk(&mut ctx, e, &net.word, attention, "")?;
    for (i, &width) in net.word.hidden.iter().enumerate() {
        x = ctx.dense(x, width, Activation::Relu, &format!("hidden{}", i + 1))?;
    }
    let out = ctx.head(x, task.classes(), "out")?;
    Ok(finish_single(ctx, out, task))
}

/// Models 1 and 2: the word CNN. They differ only in the table contents.
pub fn build_word_cnn(
    net: &NetConfig,
    input: &EmbeddingInput,
    task: &TaskSpec,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Model> {
    word_model(net, input, task, store, seed, false)
}

/// Model 5: attention pooling in place of max pooling.
pub fn build_attention_cnn(
    net: &NetConfig,
    input: &EmbeddingInput,
    task: &TaskSpec,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Model> {
    word_model(net, input, task, store, seed, true)
}

/// Model 3: two conv/pool stages over character one-hots, then dense
/// layers of the configured hidden size and `C`.
pub fn build_char_cnn(net: &NetConfig, task: &TaskSpec, store: &mut ParamStore, seed: u64) -> Result<Model> {
    let mut ctx = Ctx::new(store, seed);
    let flat = char_trunk(&mut ctx, &net.char, net.char_len, "")?;
    let hidden = ctx.dense(flat, net.char.hidden, Activation::Relu, "char.fc")?;
    let out = ctx.head(hidden, task.classes(), "out")?;
    Ok(finish_single(ctx, out, task))
}

/// Model 4: word pooled features and flattened char features, concatenated.
pub fn build_hybrid_cnn(
    net: &NetConfig,
    input: &EmbeddingInput,
    task: &TaskSpec,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Model> {
    let mut ctx = Ctx::new(store, seed);
    let e = embed_tokens(&mut ctx, input, net.seq_len, "")?;
    let words = word_trunk(&mut ctx, e, &net.word, false, "")?;
    let chars = char_trunk(&mut ctx, &net.char, net.char_len, "")?;
    let both = ctx.builder.concat(&[words, chars], 0, "hybrid.features")?;
    let out = ctx.head(both, task.classes(), "out")?;
    Ok(finish_single(ctx, out, task))
}

/// Builds the single-task network for variants 1 to 5.
pub fn build_single_task(
    arch: Architecture,
    net: &NetConfig,
    input: &EmbeddingInput,
    task: &TaskSpec,
    store: &mut ParamStore,
    seed: u64,
) -> Result<Model> {
    match arch {
        Architecture::Word => build_word_cnn(net, input, task, store, seed),
        Architecture::Char => build_char_cnn(net, task, store, seed),
        Architecture::Hybrid => build_hybrid_cnn(net, input, task, store, seed),
        Architecture::Attention => build_attention_cnn(net, input, task, store, seed),
    }
}

/// Trainable scalars of the word CNN excluding the input table.
pub fn word_cnn_param_count(d: usize, word: &WordCnnSpec, attention: bool, classes: usize) -> usize {
    let f = word.filters;
    let sum_h: usize = word.windows.iter().sum();
    let mut n = f * sum_h * d + f * word.windows.len();
    if attention {
        n += word.windows.len() * (f + 1);
    }
    let mut width = word.pooled_width();
    for &h in &word.hidden {
        n += h * width + h;
        width = h;
    }
    n + classes * width + classes
}

/// Trainable scalars of the char CNN (Model 3).
pub fn char_cnn_param_count(spec: &CharCnnSpec, char_len: usize, classes: usize) -> Result<usize> {
    let (k, f) = (spec.kernel, spec.filters);
    let convs = f * k * CHAR_ALPHABET + f + f * k * f + f;
    let flat = spec.flat_width(char_len)?;
    Ok(convs + spec.hidden * flat + spec.hidden + classes * spec.hidden + classes)
}

/// Forward outputs of every head for one example, as probabilities.
pub fn forward_all(model: &Model, store: &ParamStore, example: &EncodedExample) -> Result<Vec<Vec<f64>>> {
    let tape = model.graph.forward(store, &example.feed(&model.graph))?;
    Ok((0..model.heads.len()).map(|h| model.probabilities(&tape, h)).collect())
}
