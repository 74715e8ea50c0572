//! Fully shared multi-task network, frozen transfer and feature concatenation.

use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::params::ParamStore;

use super::{embed_tokens, word_trunk, Ctx, EmbeddingInput, Head, Model, NetConfig, TaskSpec, EMBED_TABLE};

/// Shared embedding (`sel/`), shared conv stack (`snn/`) and shared dense
/// layer (`sdl/`) over the disjoint union of every task's labels.
#[derive(Clone, Debug)]
pub struct SharedNetwork {
    pub model: Model,
    pub net: NetConfig,
    pub tasks: Vec<TaskSpec>,
}

impl SharedNetwork {
    pub fn merged_width(&self) -> usize {
        self.tasks.iter().map(TaskSpec::classes).sum()
    }

    /// Merged output slot of `label` in task `task`.
    pub fn slot(&self, task: usize, label: usize) -> usize {
        self.model.heads[task].offset + label
    }

    pub fn has_task(&self, name: &str) -> bool {
        self.tasks.iter().any(|t| t.name == name)
    }
}

/// SEL and SNN, ending in the representation `f_a` (registered as `f_a`).
fn backbone(ctx: &mut Ctx, net: &NetConfig, input: &EmbeddingInput) -> Result<usize> {
    let e = embed_tokens(ctx, input, net.seq_len, "sel/")?;
    let mut x = word_trunk(ctx, e, &net.word, false, "snn/")?;
    for (i, &width) in net.word.hidden.iter().enumerate() {
        x = ctx.dense(x, width, Activation::Relu, &format!("snn/hidden{}", i + 1))?;
    }
    Ok(x)
}

pub fn build_shared_network(
    net: &NetConfig,
    input: &EmbeddingInput,
    tasks: &[TaskSpec],
    store: &mut ParamStore,
    seed: u64,
) -> Result<SharedNetwork> {
    if tasks.len() < 2 {
        return Err(Error::Model(format!(
            "shared network needs at least two tasks, got {}",
            tasks.len()
        )));
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].iter().any(|u| u.name == t.name) {
            return Err(Error::Model(format!("task '{}' appears twice", t.name)));
        }
    }
    let mut ctx = Ctx::new(store, seed);
    let fa = backbone(&mut ctx, net, input)?;
    ctx.builder.name("f_a", fa);
    let width = tasks.iter().map(TaskSpec::classes).sum();
    let out = ctx.head(fa, width, "sdl/out")?;
    ctx.builder.mark_output(out);
    let mut offset = 0;
    let heads = tasks
        .iter()
        .map(|t| {
            let h = Head {
                task: t.name.clone(),
                output: out,
                offset,
                classes: t.classes(),
            };
            offset += t.classes();
            h
        })
        .collect();
    Ok(SharedNetwork {
        model: Model {
            graph: ctx.finish(),
            heads,
        },
        net: net.clone(),
        tasks: tasks.to_vec(),
    })
}

/// A single-task model over frozen transferred layers, with its own store.
#[derive(Clone, Debug)]
pub struct DerivedHead {
    pub model: Model,
    pub store: ParamStore,
    /// Set when the task was not among the backbone's training tasks.
    pub new_task: bool,
}

fn copy_frozen<'a>(store: &mut ParamStore, resolve: impl Fn(&str) -> (&'a ParamStore, String)) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        if name.starts_with("head/") {
            continue;
        }
        let (from, source) = resolve(&name);
        let src = from
            .by_name(&source)
            .ok_or_else(|| Error::Model(format!("backbone has no parameter '{source}'")))?;
        let dst = store.by_name_mut(&name).expect("listed above");
        if dst.tensor.shape() != src.tensor.shape() {
            return Err(Error::Model(format!(
                "'{name}' has shape {:?} but the backbone holds {:?}",
                dst.tensor.shape(),
                src.tensor.shape()
            )));
        }
        dst.tensor.values_mut().copy_from_slice(src.tensor.values());
        dst.tensor.set_trainable(false);
        dst.tensor.clear_grad();
    }
    Ok(())
}

/// Copies SEL and SNN from a trained shared network, freezes them and adds
/// a fresh dense + softmax head (`head/out`) for `task`.
pub fn derive_task_head(
    sn: &SharedNetwork,
    sn_store: &ParamStore,
    input: &EmbeddingInput,
    task: &TaskSpec,
    seed: u64,
) -> Result<DerivedHead> {
    let mut store = ParamStore::new();
    let mut ctx = Ctx::new(&mut store, seed);
    let fa = backbone(&mut ctx, &sn.net, input)?;
    ctx.builder.name("f_a", fa);
    let out = ctx.head(fa, task.classes(), "head/out")?;
    ctx.builder.mark_output(out);
    let graph = ctx.finish();
    copy_frozen(&mut store, |n| (sn_store, n.to_string()))?;
    Ok(DerivedHead {
        model: Model {
            graph,
            heads: vec![Head {
                task: task.name.clone(),
                output: out,
                offset: 0,
                classes: task.classes(),
            }],
        },
        store,
        new_task: !sn.has_task(&task.name),
    })
}

/// Model 8: `f_a` of two frozen shared networks, concatenated into a fresh
/// head. Backbone parameters are stored under `a/` and `b/`.
pub fn build_concat_model(
    a: (&SharedNetwork, &ParamStore),
    b: (&SharedNetwork, &ParamStore),
    input: &EmbeddingInput,
    task: &TaskSpec,
    seed: u64,
) -> Result<DerivedHead> {
    for (tag, s) in [("a", a.1), ("b", b.1)] {
        let table = s
            .by_name(EMBED_TABLE)
            .ok_or_else(|| Error::Model(format!("backbone {tag} has no input table")))?;
        if table.tensor.values() != input.table.values() {
            return Err(Error::Model(format!(
                "backbone {tag} was built over different input vectors"
            )));
        }
    }
    let mut store = ParamStore::new();
    let mut ctx = Ctx::new(&mut store, seed);
    ctx.set_scope("a/", seed);
    let fa_a = backbone(&mut ctx, &a.0.net, input)?;
    ctx.set_scope("b/", seed);
    let fa_b = backbone(&mut ctx, &b.0.net, input)?;
    ctx.set_scope("", seed);
    ctx.builder.name("f_a/a", fa_a);
    ctx.builder.name("f_a/b", fa_b);
    let joined = ctx.builder.concat(&[fa_a, fa_b], 0, "f_a")?;
    ctx.builder.name("f_a", joined);
    let out = ctx.head(joined, task.classes(), "head/out")?;
    ctx.builder.mark_output(out);
    let graph = ctx.finish();
    copy_frozen(&mut store, |n| match n.split_once('/') {
        Some(("a", rest)) => (a.1, rest.to_string()),
        Some(("b", rest)) => (b.1, rest.to_string()),
        _ => (a.1, n.to_string()),
    })?;
    Ok(DerivedHead {
        model: Model {
            graph,
            heads: vec![Head {
                task: task.name.clone(),
                output: out,
                offset: 0,
                classes: task.classes(),
            }],
        },
        store,
        new_task: !a.0.has_task(&task.name) && !b.0.has_task(&task.name),
    })
}
