//! Training loops, evaluation and batch composition.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EncodedExample;
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, one_hot, softmax_cross_entropy_grad};
use crate::metrics::{argmax, ConfusionMatrix};
use crate::models::{Model, SharedNetwork, SoftSharedNetwork};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Per-task loss weights α_k; missing entries count as 1.
    #[serde(default)]
    pub task_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 30,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            adam: AdamConfig::default(),
            task_weights: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience must be at least 1 and below max epochs, got {} and {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn weight(&self, task: usize) -> f64 {
        self.task_weights.get(task).copied().unwrap_or(1.0)
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub task: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "phase={} epoch={} split={} task={} loss={:.17e} accuracy={:.17e}",
            self.phase, self.epoch, self.split, self.task, self.loss, self.accuracy
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub best_loss: f64,
    pub epochs_run: usize,
}

/// Examples of one task: what to train on and what to stop on.
#[derive(Clone, Copy, Debug)]
pub struct TaskData<'a> {
    pub train: &'a [EncodedExample],
    pub val: &'a [EncodedExample],
}

/// Per-task sample counts in batch `batch_index`: `batch / k` each, with the
/// `batch % k` extra samples rotating through the tasks.
pub fn batch_shares(tasks: usize, batch: usize, batch_index: usize) -> Vec<usize> {
    if tasks == 0 {
        return Vec::new();
    }
    let (base, extra) = (batch / tasks, batch % tasks);
    let mut shares = vec![base; tasks];
    for j in 0..extra {
        shares[(batch_index * extra + j) % tasks] += 1;
    }
    shares
}

/// Loss and class prediction for one example under `head`, accumulating
/// `weight · ∂loss` into the store.
fn accumulate_example(
    model: &Model,
    store: &mut ParamStore,
    head: usize,
    example: &EncodedExample,
    weight: f64,
) -> Result<(f64, usize)> {
    let h = &model.heads[head];
    let tape = model.graph.forward(store, &example.feed(&model.graph))?;
    let probs = tape.value(h.output);
    let truth = one_hot(h.offset + example.label, probs.len());
    let ce = cross_entropy(probs, &truth)?;
    let logits = model
        .graph
        .logits_of(h.output)
        .ok_or_else(|| Error::Model("head output is not a softmax".into()))?;
    let grad: Vec<f64> = softmax_cross_entropy_grad(probs, &truth)
        .iter()
        .map(|g| g * weight)
        .collect();
    model.graph.backward(store, &tape, &[(logits, &grad)])?;
    let pred = argmax(&model.probabilities(&tape, head));
    Ok((weight * ce.loss, pred))
}

fn check_finite(loss: f64, phase: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{phase}: non-finite loss {loss} at epoch {epoch}, batch {batch}"
        )))
    }
}

/// Mean loss and accuracy of `head` over `examples`.
pub fn loss_and_accuracy(
    model: &Model,
    store: &ParamStore,
    head: usize,
    examples: &[EncodedExample],
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let h = &model.heads[head];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        let tape = model.graph.forward(store, &ex.feed(&model.graph))?;
        let probs = tape.value(h.output);
        loss += cross_entropy(probs, &one_hot(h.offset + ex.label, probs.len()))?.loss;
        if argmax(&model.probabilities(&tape, head)) == ex.label {
            correct += 1;
        }
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Confusion matrix of `head` over `examples`; argmax ties go to the lower
/// class index.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    head: usize,
    labels: &[String],
    examples: &[EncodedExample],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(labels.to_vec());
    for ex in examples {
        let p = model.predict(store, ex, head)?;
        cm.record(ex.label, argmax(&p));
    }
    Ok(cm)
}

/// Early-stopping bookkeeping: keeps a snapshot of the best weights.
struct Stopper {
    best_loss: f64,
    best_epoch: usize,
    best: Option<Vec<Vec<f64>>>,
    stale: usize,
    patience: usize,
}

impl Stopper {
    fn new(patience: usize) -> Self {
        Stopper {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            best: None,
            stale: 0,
            patience,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, loss: f64, store: &ParamStore) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.best = Some(store.snapshot());
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= self.patience
        }
    }

    fn restore(self, store: &mut ParamStore, history: Vec<EpochRecord>, epochs_run: usize) -> TrainOutcome {
        if let Some(s) = &self.best {
            store.restore(s);
        }
        TrainOutcome {
            history,
            best_epoch: self.best_epoch,
            best_loss: self.best_loss,
            epochs_run,
        }
    }
}

/// Cycles through a shuffled copy of `0..len`, reshuffling at each wrap.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    passes: usize,
}

impl Cursor {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Cursor {
            order,
            pos: 0,
            passes: 0,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.passes += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    fn consumed(&self) -> usize {
        self.passes * self.order.len() + self.pos
    }
}

/// Mini-batch Adam on one head. Stops early on validation loss (training
/// loss when `val` is empty) and leaves the best epoch's weights in `store`.
pub fn train_stl(
    model: &Model,
    store: &mut ParamStore,
    head: usize,
    data: TaskData,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_stl_phase(model, store, head, data, config, "stl")
}

fn train_stl_phase(
    model: &Model,
    store: &mut ParamStore,
    head: usize,
    data: TaskData,
    config: &TrainConfig,
    phase: &str,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data(format!("{phase}: training split is empty")));
    }
    let task = model.heads[head].task.clone();
    let mut adam = Adam::new(config.adam, store);
    let mut rng = rng_for(config.seed, "stl/shuffle");
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut stopper = Stopper::new(config.patience);
    let mut history = Vec::new();
    let mut epoch = 0;
    while epoch < config.max_epochs {
        epoch += 1;
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            store.zero_grads();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let ex = &data.train[i];
                let (l, pred) = accumulate_example(model, store, head, ex, config.weight(0))?;
                batch_loss += l;
                correct += usize::from(pred == ex.label);
            }
            check_finite(batch_loss, phase, epoch, b)?;
            adam.step(store)?;
            total += batch_loss;
        }
        let n = data.train.len() as f64;
        history.push(EpochRecord {
            phase: phase.into(),
            epoch,
            split: "train".into(),
            task: task.clone(),
            loss: total / n,
            accuracy: correct as f64 / n,
        });
        let monitored = if data.val.is_empty() {
            total / n
        } else {
            let (loss, acc) = loss_and_accuracy(model, store, head, data.val)?;
            history.push(EpochRecord {
                phase: phase.into(),
                epoch,
                split: "val".into(),
                task: task.clone(),
                loss,
                accuracy: acc,
            });
            loss
        };
        if stopper.observe(epoch, monitored, store) {
            break;
        }
    }
    Ok(stopper.restore(store, history, epoch))
}

fn validation_sum(
    model: &Model,
    store: &ParamStore,
    tasks: &[TaskData],
    phase: &str,
    epoch: usize,
    history: &mut Vec<EpochRecord>,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut any = false;
    for (k, t) in tasks.iter().enumerate() {
        if t.val.is_empty() {
            continue;
        }
        any = true;
        let (loss, acc) = loss_and_accuracy(model, store, k, t.val)?;
        history.push(EpochRecord {
            phase: phase.into(),
            epoch,
            split: "val".into(),
            task: model.heads[k].task.clone(),
            loss,
            accuracy: acc,
        });
        sum += loss;
    }
    Ok(any.then_some(sum))
}

fn check_tasks(tasks: &[TaskData], heads: usize, phase: &str) -> Result<()> {
    if tasks.len() != heads {
        return Err(Error::Data(format!(
            "{phase}: {} task splits for {heads} heads",
            tasks.len()
        )));
    }
    if tasks.len() < 2 {
        return Err(Error::Data(format!("{phase}: needs at least two tasks")));
    }
    if let Some(k) = tasks.iter().position(|t| t.train.is_empty()) {
        return Err(Error::Data(format!("{phase}: task {k} has no training examples")));
    }
    Ok(())
}

/// Step 1 of the two-step procedure: batches draw equal shares from every
/// task, scored by the merged softmax. An epoch ends once the largest task
/// has been seen in full; smaller tasks reshuffle and continue.
pub fn train_shared_network(
    sn: &SharedNetwork,
    store: &mut ParamStore,
    tasks: &[TaskData],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let phase = "shared";
    config.validate()?;
    check_tasks(tasks, sn.model.heads.len(), phase)?;
    let model = &sn.model;
    let k = tasks.len();
    let mut rng = rng_for(config.seed, "shared/shuffle");
    let largest = (0..k)
        .max_by_key(|&t| (tasks[t].train.len(), std::cmp::Reverse(t)))
        .expect("k >= 2");
    let mut adam = Adam::new(config.adam, store);
    let mut stopper = Stopper::new(config.patience);
    let mut history = Vec::new();
    let mut epoch = 0;
    while epoch < config.max_epochs {
        epoch += 1;
        let mut cursors: Vec<Cursor> = tasks.iter().map(|t| Cursor::new(t.train.len(), &mut rng)).collect();
        let mut totals = vec![(0.0, 0usize, 0usize); k];
        let mut b = 0;
        while cursors[largest].consumed() < tasks[largest].train.len() {
            store.zero_grads();
            let mut batch_loss = 0.0;
            for (t, share) in batch_shares(k, config.batch_size, b).into_iter().enumerate() {
                for _ in 0..share {
                    let ex = &tasks[t].train[cursors[t].next(&mut rng)];
                    let (l, pred) = accumulate_example(model, store, t, ex, config.weight(t))?;
                    batch_loss += l;
                    totals[t].0 += l;
                    totals[t].1 += usize::from(pred == ex.label);
                    totals[t].2 += 1;
                }
            }
            check_finite(batch_loss, phase, epoch, b)?;
            adam.step(store)?;
            b += 1;
        }
        let mut train_sum = 0.0;
        for (t, &(loss, correct, seen)) in totals.iter().enumerate() {
            let seen = seen.max(1) as f64;
            train_sum += loss / seen;
            history.push(EpochRecord {
                phase: phase.into(),
                epoch,
                split: "train".into(),
                task: model.heads[t].task.clone(),
                loss: loss / seen,
                accuracy: correct as f64 / seen,
            });
        }
        let monitored = validation_sum(model, store, tasks, phase, epoch, &mut history)?.unwrap_or(train_sum);
        if stopper.observe(epoch, monitored, store) {
            break;
        }
    }
    Ok(stopper.restore(store, history, epoch))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SoftOutcome {
    pub pretrain: Vec<TrainOutcome>,
    pub joint: TrainOutcome,
}

/// Phase 1 trains each subnet alone (only its own parameters trainable,
/// cross transforms held at their values). Phase 2 trains everything
/// jointly, one optimizer step per task batch, tasks interleaved.
pub fn train_soft_shared(
    ssn: &SoftSharedNetwork,
    store: &mut ParamStore,
    tasks: &[TaskData],
    config: &TrainConfig,
) -> Result<SoftOutcome> {
    config.validate()?;
    check_tasks(tasks, ssn.model.heads.len(), "soft")?;
    let original = store.trainable_mask();
    let mut pretrain = Vec::with_capacity(tasks.len());
    for (t, data) in tasks.iter().enumerate() {
        let prefix = ssn.prefix(t);
        let mask: Vec<bool> = store
            .iter()
            .zip(&original)
            .map(|((_, p), &on)| on && p.name.starts_with(&prefix))
            .collect();
        store.apply_trainable_mask(&mask);
        let cfg = TrainConfig {
            seed: crate::seed::derive_seed(config.seed, &format!("soft/pretrain/{t}")),
            ..config.clone()
        };
        let out = train_stl_phase(
            &ssn.model,
            store,
            t,
            *data,
            &cfg,
            &format!("pretrain:{}", ssn.tasks[t].name),
        );
        store.apply_trainable_mask(&original);
        pretrain.push(out?);
    }
    let joint = train_soft_joint(ssn, store, tasks, config)?;
    Ok(SoftOutcome { pretrain, joint })
}

fn train_soft_joint(
    ssn: &SoftSharedNetwork,
    store: &mut ParamStore,
    tasks: &[TaskData],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let phase = "joint";
    let model = &ssn.model;
    let k = tasks.len();
    let mut rng = rng_for(config.seed, "joint/shuffle");
    let largest = (0..k)
        .max_by_key(|&t| (tasks[t].train.len(), std::cmp::Reverse(t)))
        .expect("k >= 2");
    let mut adam = Adam::new(config.adam, store);
    let mut stopper = Stopper::new(config.patience);
    let mut history = Vec::new();
    let mut epoch = 0;
    while epoch < config.max_epochs {
        epoch += 1;
        let mut cursors: Vec<Cursor> = tasks.iter().map(|t| Cursor::new(t.train.len(), &mut rng)).collect();
        let mut totals = vec![(0.0, 0usize, 0usize); k];
        let mut step = 0;
        while cursors[largest].consumed() < tasks[largest].train.len() {
            for t in 0..k {
                store.zero_grads();
                let mut batch_loss = 0.0;
                for _ in 0..config.batch_size.min(tasks[t].train.len()) {
                    let ex = &tasks[t].train[cursors[t].next(&mut rng)];
                    let (l, pred) = accumulate_example(model, store, t, ex, config.weight(t))?;
                    batch_loss += l;
                    totals[t].0 += l;
                    totals[t].1 += usize::from(pred == ex.label);
                    totals[t].2 += 1;
                }
                check_finite(batch_loss, phase, epoch, step)?;
                adam.step(store)?;
            }
            step += 1;
        }
        let mut train_sum = 0.0;
        for (t, &(loss, correct, seen)) in totals.iter().enumerate() {
            let seen = seen.max(1) as f64;
            train_sum += loss / seen;
            history.push(EpochRecord {
                phase: phase.into(),
                epoch,
                split: "train".into(),
                task: model.heads[t].task.clone(),
                loss: loss / seen,
                accuracy: correct as f64 / seen,
            });
        }
        let monitored = validation_sum(model, store, tasks, phase, epoch, &mut history)?.unwrap_or(train_sum);
        if stopper.observe(epoch, monitored, store) {
            break;
        }
    }
    Ok(stopper.restore(store, history, epoch))
}

#[cfg(test)]
mod tests;
