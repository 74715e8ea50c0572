//! Central-difference gradient checking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Feed, Graph, NodeId, Tape};
use crate::loss::{cross_entropy, one_hot, softmax_cross_entropy_grad};
use crate::params::{ParamId, ParamStore};

/// Scalar function of a graph's forward pass whose gradient is checked.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Cross-entropy of a softmax output node against a class index.
    CrossEntropy { output: NodeId, class: usize },
    /// `Σ_i w_i · value_i` at any node.
    Projection { node: NodeId, weights: &'a [f64] },
}

impl Objective<'_> {
    fn value(&self, tape: &Tape) -> Result<f64> {
        match *self {
            Objective::CrossEntropy { output, class } => {
                let p = tape.value(output);
                Ok(cross_entropy(p, &one_hot(class, p.len()))?.loss)
            }
            Objective::Projection { node, weights } => {
                Ok(tape.value(node).iter().zip(weights).map(|(a, b)| a * b).sum())
            }
        }
    }

    fn seed(&self, graph: &Graph, tape: &Tape) -> Result<(NodeId, Vec<f64>)> {
        match *self {
            Objective::CrossEntropy { output, class } => {
                let logits = graph
                    .logits_of(output)
                    .ok_or_else(|| Error::Model("cross-entropy objective needs a softmax output".into()))?;
                let p = tape.value(output);
                Ok((logits, softmax_cross_entropy_grad(p, &one_hot(class, p.len()))))
            }
            Objective::Projection { node, weights } => Ok((node, weights.to_vec())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub probes: usize,
    pub step: f64,
    /// Probes whose perturbed passes come closer than this to a relu or
    /// max-pool kink are rejected and redrawn.
    pub kink_margin: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            probes: 100,
            step: 1e-5,
            kink_margin: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub probes: usize,
    pub rejected: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backpropagated gradients with central differences at randomly
/// drawn coordinates of every trainable parameter the graph touches. Each
/// parameter receives at least one probe.
pub fn grad_check(
    graph: &Graph,
    store: &ParamStore,
    feed: &Feed,
    objective: Objective<'_>,
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    work.iter_mut().for_each(|p| p.tensor.clear_grad());
    let tape = graph.forward(&work, feed)?;
    let (seed_node, seed) = objective.seed(graph, &tape)?;
    graph.backward(&mut work, &tape, &[(seed_node, &seed)])?;

    let mut targets: Vec<ParamId> = graph
        .param_ids()
        .into_iter()
        .filter(|&p| work.get(p).tensor.trainable())
        .collect();
    targets.sort();
    targets.dedup();
    if targets.is_empty() {
        return Err(Error::Model("graph has no trainable parameters to check".into()));
    }
    let sizes: Vec<usize> = targets.iter().map(|&p| work.get(p).tensor.len()).collect();
    let total: usize = sizes.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut errors: Vec<ParamError> = targets
        .iter()
        .map(|&p| ParamError {
            name: work.get(p).name.clone(),
            probes: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();

    let wanted = options.probes.max(targets.len());
    let max_attempts = wanted * 20;
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut attempt = 0usize;
    while accepted < wanted && attempt < max_attempts {
        // First pass covers each parameter once; after that draw by size.
        let slot = if attempt < targets.len() {
            attempt
        } else {
            let mut r = rng.gen_range(0..total);
            let mut k = 0;
            while r >= sizes[k] {
                r -= sizes[k];
                k += 1;
            }
            k
        };
        attempt += 1;
        let pid = targets[slot];
        let index = rng.gen_range(0..sizes[slot]);
        let analytic = work.get(pid).tensor.grad().map_or(0.0, |g| g[index]);

        let original = work.get(pid).tensor.values()[index];
        work.get_mut(pid).tensor.values_mut()[index] = original + options.step;
        let plus = graph.forward(&work, feed)?;
        work.get_mut(pid).tensor.values_mut()[index] = original - options.step;
        let minus = graph.forward(&work, feed)?;
        work.get_mut(pid).tensor.values_mut()[index] = original;

        if plus.kink_margin() < options.kink_margin || minus.kink_margin() < options.kink_margin {
            rejected += 1;
            continue;
        }
        let numeric = (objective.value(&plus)? - objective.value(&minus)?) / (2.0 * options.step);
        let err = relative_error(analytic, numeric);
        let e = &mut errors[slot];
        e.probes += 1;
        if err > e.max_rel_error || e.probes == 1 {
            e.max_rel_error = err.max(e.max_rel_error);
            e.worst_index = index;
            e.analytic = analytic;
            e.numeric = numeric;
        }
        accepted += 1;
    }

    Ok(GradCheckReport {
        params: errors,
        probes: accepted,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Activation, GraphBuilder, FLIP_CONV_FILTER_GRAD};
    use crate::tensor::Tensor;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .with_trainable(true)
    }

    #[test]
    fn linear_dense_is_exact_to_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w = store.add("w", random_tensor(&mut rng, vec![3, 4])).unwrap();
        let b = store.add("b", random_tensor(&mut rng, vec![3])).unwrap();
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", vec![4]);
        let wn = gb.param(&store, w);
        let bn = gb.param(&store, b);
        let out = gb.dense(x, wn, bn, Activation::Identity, "d").unwrap();
        let g = gb.finish();
        let feed = Feed::new().with("x", Tensor::vector(vec![0.3, -0.7, 1.1, 0.05]));
        let weights = [0.4, -1.3, 0.9];
        let report = grad_check(
            &g,
            &store,
            &feed,
            Objective::Projection {
                node: out,
                weights: &weights,
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.probes >= 100);
        assert!(report.max_rel_error() < 1e-9, "{:?}", report.worst());
    }

    fn conv_softmax(rng: &mut ChaCha8Rng) -> (Graph, ParamStore, Feed, NodeId) {
        let mut store = ParamStore::new();
        let w = store.add("conv.w", random_tensor(rng, vec![3, 2, 4])).unwrap();
        let b = store.add("conv.b", random_tensor(rng, vec![3])).unwrap();
        let dw = store.add("out.w", random_tensor(rng, vec![2, 3])).unwrap();
        let db = store.add("out.b", random_tensor(rng, vec![2])).unwrap();
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", vec![6, 4]);
        let (wn, bn) = (gb.param(&store, w), gb.param(&store, b));
        let c = gb.conv1d(x, wn, bn, 1, Activation::Tanh, "conv").unwrap();
        let p = gb.global_maxpool(c, "pool").unwrap();
        let (dwn, dbn) = (gb.param(&store, dw), gb.param(&store, db));
        let logits = gb.dense(p, dwn, dbn, Activation::Identity, "out").unwrap();
        let out = gb.softmax(logits, "softmax").unwrap();
        gb.mark_output(out);
        let feed = Feed::new().with("x", random_tensor(rng, vec![6, 4]));
        (gb.finish(), store, feed, out)
    }

    #[test]
    fn sign_flipped_conv_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (g, store, feed, out) = conv_softmax(&mut rng);
        let objective = Objective::CrossEntropy { output: out, class: 1 };
        let clean = grad_check(&g, &store, &feed, objective, GradCheckOptions::default()).unwrap();
        assert!(clean.max_rel_error() < 1e-4, "{:?}", clean.worst());

        FLIP_CONV_FILTER_GRAD.with(|f| f.set(true));
        let broken = grad_check(&g, &store, &feed, objective, GradCheckOptions::default());
        FLIP_CONV_FILTER_GRAD.with(|f| f.set(false));
        let broken = broken.unwrap();
        let worst = broken.worst().unwrap();
        assert_eq!(worst.name, "conv.w");
        assert!((worst.max_rel_error - 2.0).abs() < 1e-3, "{worst:?}");
    }
}
