//! Soft parameter sharing: one subnet per task, exchanging features through
//! linear cross transforms at every post-pooling level.

use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::params::ParamStore;

use super::{embed_tokens, word_trunk, Ctx, EmbeddingInput, Head, Model, NetConfig, TaskSpec};

#[derive(Clone, Debug)]
pub struct SoftSharedNetwork {
    pub model: Model,
    pub net: NetConfig,
    pub tasks: Vec<TaskSpec>,
    /// Number of sharing levels: the pooled features plus each hidden layer.
    pub levels: usize,
}

impl SoftSharedNetwork {
    /// Parameter-name prefix of subnet `task`.
    pub fn prefix(&self, task: usize) -> String {
        format!("{}/", self.tasks[task].name)
    }

    /// Names of all cross-transform parameters.
    pub fn transform_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            for i in &self.tasks {
                for j in &self.tasks {
                    if i.name != j.name {
                        out.push(transform_name(l, &i.name, &j.name, "w"));
                        out.push(transform_name(l, &i.name, &j.name, "b"));
                    }
                }
            }
        }
        out
    }
}

pub(super) fn transform_name(level: usize, to: &str, from: &str, part: &str) -> String {
    format!("x{level}:{to}<-{from}.{part}")
}

/// Ordered task pairs times levels.
pub fn cross_transform_count(tasks: usize, levels: usize) -> usize {
    tasks * tasks.saturating_sub(1) * levels
}

/// Subnet `i` is built under prefix `<task>/` with `seeds[i]`; cross
/// transforms start at zero, so the initial forward of each output equals
/// the standalone word CNN built with the same seed.
pub fn build_soft_shared(
    net: &NetConfig,
    input: &EmbeddingInput,
    tasks: &[TaskSpec],
    store: &mut ParamStore,
    seeds: &[u64],
) -> Result<SoftSharedNetwork> {
    if tasks.len() < 2 {
        return Err(Error::Model(format!(
            "soft sharing needs at least two tasks, got {}",
            tasks.len()
        )));
    }
    if seeds.len() != tasks.len() {
        return Err(Error::Model("one seed per subnet is required".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.name.contains(['/', ':']) || tasks[..i].iter().any(|u| u.name == t.name) {
            return Err(Error::Model(format!(
                "task name '{}' is repeated or contains '/' or ':'",
                t.name
            )));
        }
    }
    let n = tasks.len();
    let mut ctx = Ctx::new(store, seeds[0]);
    let mut features = Vec::with_capacity(n);
    for (i, t) in tasks.iter().enumerate() {
        ctx.set_scope(&format!("{}/", t.name), seeds[i]);
        let e = embed_tokens(&mut ctx, input, net.seq_len, "")?;
        features.push(word_trunk(&mut ctx, e, &net.word, false, "")?);
    }
    let levels = net.word.hidden.len() + 1;
    for level in 0..levels {
        let widths: Vec<usize> = features.iter().map(|&f| ctx.builder.shape(f)[0]).collect();
        if widths.iter().any(|&w| w != widths[0]) {
            return Err(Error::Model(format!(
                "subnet widths differ at level {level}: {widths:?}"
            )));
        }
        ctx.set_scope("", seeds[0]);
        let mut merged = Vec::with_capacity(n);
        for i in 0..n {
            let mut terms = vec![features[i]];
            for j in (0..n).filter(|&j| j != i) {
                let (ti, tj) = (&tasks[i].name, &tasks[j].name);
                let w = ctx.zeros(&transform_name(level, ti, tj, "w"), vec![widths[i], widths[j]])?;
                let b = ctx.zeros(&transform_name(level, ti, tj, "b"), vec![widths[i]])?;
                let label = transform_name(level, ti, tj, "g");
                terms.push(ctx.builder.dense(features[j], w, b, Activation::Identity, &label)?);
            }
            merged.push(ctx.builder.sum(&terms, &format!("merge{level}:{}", tasks[i].name))?);
        }
        if level + 1 < levels {
            let width = net.word.hidden[level];
            for i in 0..n {
                ctx.set_scope(&format!("{}/", tasks[i].name), seeds[i]);
                features[i] = ctx.dense(merged[i], width, Activation::Relu, &format!("hidden{}", level + 1))?;
            }
        } else {
            features = merged;
        }
    }
    let mut heads = Vec::with_capacity(n);
    for (i, t) in tasks.iter().enumerate() {
        ctx.set_scope(&format!("{}/", t.name), seeds[i]);
        let out = ctx.head(features[i], t.classes(), "out")?;
        ctx.builder.mark_output(out);
        heads.push(Head {
            task: t.name.clone(),
            output: out,
            offset: 0,
            classes: t.classes(),
        });
    }
    Ok(SoftSharedNetwork {
        model: Model {
            graph: ctx.finish(),
            heads,
        },
        net: net.clone(),
        tasks: tasks.to_vec(),
        levels,
    })
}
