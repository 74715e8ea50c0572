//! End-to-end runs: resources → preprocessing → encoding → per-variant
//! training → cross-validation and official-test evaluation → reports and
//! saved weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{Role, RunConfig};
use crate::dataset::{load_dataset, Dataset};
use crate::embed::{
    composed_input_matrix, default_seq_len, random_input_matrix, subword_bags, word_input_matrix, EmbeddingTable,
    EncodedExample, Encoder, SubwordModel, Vocab,
};
use crate::error::{Error, Result};
use crate::folds::{stratified_holdout, stratified_kfold, FoldPlan};
use crate::metrics::ConfusionMatrix;
use crate::models::{
    build_concat_model, build_shared_network, build_single_task, build_soft_shared, derive_task_head, Architecture,
    EmbeddingInput, Model, NetConfig, SubwordInput, TaskSpec, EMBED_TABLE,
};
use crate::params::ParamStore;
use crate::persist::{apply_weights, decode_weights, encode_weights, WeightSet};
use crate::preprocess::{EmoticonTable, Preprocessor, SegmenterLexicon};
use crate::report::{EvalRecord, Report, TaskReport};
use crate::seed::derive_seed;
use crate::train::{evaluate, train_shared_network, train_soft_shared, train_stl, EpochRecord, TaskData, TrainConfig};

/// Lexicon, emoticon table and vector tables named by a config.
#[derive(Clone, Debug, Default)]
pub struct Resources {
    pub preprocessor: Preprocessor,
    pub word_table: Option<EmbeddingTable>,
    pub subword_table: Option<EmbeddingTable>,
}

pub fn load_resources(cfg: &RunConfig) -> Result<Resources> {
    let lexicon = match &cfg.lexicon {
        Some(p) => SegmenterLexicon::load(p)?,
        None => SegmenterLexicon::default(),
    };
    let emoticons = match &cfg.emoticons {
        Some(p) => EmoticonTable::load(p)?,
        None => EmoticonTable::new(),
    };
    let word_table = cfg
        .embeddings
        .as_ref()
        .map(|p| EmbeddingTable::load(p, Some(cfg.word_dim)))
        .transpose()?;
    let subword_table = cfg
        .subwords
        .as_ref()
        .map(|p| EmbeddingTable::load(p, Some(cfg.subword_dim)))
        .transpose()?;
    Ok(Resources {
        preprocessor: Preprocessor::new(lexicon, emoticons),
        word_table,
        subword_table,
    })
}

#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub spec: TaskSpec,
    pub role: Role,
    pub weight: f64,
    pub train: Vec<EncodedExample>,
    pub test: Option<Vec<EncodedExample>>,
}

impl PreparedTask {
    pub fn labels(&self) -> Vec<usize> {
        self.train.iter().map(|e| e.label).collect()
    }
}

/// Everything a protocol needs, built once per run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tasks: Vec<PreparedTask>,
    pub encoder: Encoder,
    pub input: EmbeddingInput,
    pub net: NetConfig,
    pub events: Vec<String>,
}

/// Input vectors for every vocabulary row, per the variant's init mode.
pub fn build_input(cfg: &RunConfig, res: &Resources, vocab: &Vocab) -> EmbeddingInput {
    if cfg.variant == 1 {
        let dim = cfg.word_dim + cfg.subword_dim;
        return EmbeddingInput::fixed(random_input_matrix(vocab, dim, derive_seed(cfg.seed, "inputs/random")));
    }
    let sub = match &res.subword_table {
        Some(t) => SubwordModel::from_table(t, cfg.subword_buckets),
        None => SubwordModel::random(
            cfg.subword_dim,
            cfg.subword_buckets,
            derive_seed(cfg.seed, "inputs/subword"),
        ),
    };
    let word = res.word_table.as_ref();
    if cfg.trainable_subwords {
        EmbeddingInput {
            table: word_input_matrix(vocab, word, cfg.word_dim),
            subword: Some(SubwordInput {
                table: sub.table.clone(),
                bags: Arc::new(subword_bags(vocab, &sub)),
            }),
        }
    } else {
        EmbeddingInput::fixed(composed_input_matrix(vocab, word, cfg.word_dim, &sub))
    }
}

fn load_task_data(
    cfg: &RunConfig,
    labels_override: Option<&[Vec<String>]>,
) -> Result<(Vec<(Dataset, Option<Dataset>)>, Vec<String>)> {
    let mut out = Vec::new();
    let mut events = Vec::new();
    for (i, t) in cfg.tasks.iter().enumerate() {
        let order = labels_override.map(|l| l[i].as_slice()).or(t.labels.as_deref());
        let train = load_dataset(&t.path, order)?;
        let test = t
            .test
            .as_ref()
            .map(|p| load_dataset(p, Some(&train.labels)))
            .transpose()?;
        events.extend(train.warnings.iter().cloned());
        if let Some(d) = &test {
            events.extend(d.warnings.iter().cloned());
        }
        if train.labels.len() < 2 {
            return Err(Error::Data(format!("task {}: needs at least two labels", t.name)));
        }
        out.push((train, test));
    }
    Ok((out, events))
}

/// Loads data, preprocesses, builds the vocabulary (or reuses `vocab`) and
/// encodes every example.
pub fn prepare(cfg: &RunConfig, res: &Resources, vocab: Option<Vocab>) -> Result<Prepared> {
    prepare_with_labels(cfg, res, vocab, None)
}

fn prepare_with_labels(
    cfg: &RunConfig,
    res: &Resources,
    vocab: Option<Vocab>,
    labels: Option<&[Vec<String>]>,
) -> Result<Prepared> {
    let (data, mut events) = load_task_data(cfg, labels).map_err(|e| e.in_stage("load data"))?;
    let pre = &res.preprocessor;
    let mut emoticons = crate::preprocess::EmoticonStats::default();
    let mut clean = |d: &Dataset| {
        d.examples
            .iter()
            .map(|e| {
                let c = pre.run(&e.text);
                emoticons.merge(c.emoticons);
                c
            })
            .collect::<Vec<_>>()
    };
    let cleaned: Vec<(Vec<_>, Option<Vec<_>>)> = data
        .iter()
        .map(|(tr, te)| (clean(tr), te.as_ref().map(&mut clean)))
        .collect();
    if emoticons.substituted + emoticons.dropped > 0 {
        events.push(format!(
            "emoticons: {} mapped to categories, {} unmapped dropped",
            emoticons.substituted, emoticons.dropped
        ));
    }
    let vocab = vocab.unwrap_or_else(|| {
        Vocab::build(
            cleaned
                .iter()
                .flat_map(|(tr, te)| tr.iter().chain(te.iter().flatten()).map(|c| c.words())),
        )
    });
    let lengths: Vec<usize> = cleaned
        .iter()
        .flat_map(|(tr, _)| tr.iter().map(|c| c.tokens.len()))
        .collect();
    let seq_len = if cfg.seq_len > 0 {
        cfg.seq_len
    } else {
        default_seq_len(&lengths)
    };
    let net = cfg.net_config(seq_len.max(cfg.word.windows.iter().copied().max().unwrap_or(1)));
    if net.seq_len != seq_len {
        events.push(format!(
            "sequence length raised from {seq_len} to the widest window {}",
            net.seq_len
        ));
    }
    if let Some(t) = &res.word_table {
        if !t.duplicates.is_empty() {
            events.push(format!(
                "word vectors: {} duplicate tokens, first kept",
                t.duplicates.len()
            ));
        }
        let found = vocab.tokens().iter().filter(|w| t.vocab.id(w).is_some()).count();
        events.push(format!(
            "word vectors cover {found} of {} vocabulary entries",
            vocab.len()
        ));
    }
    let input = build_input(cfg, res, &vocab);
    let encoder = Encoder {
        vocab,
        seq_len: net.seq_len,
        char_len: net.char_len,
    };
    let mut tasks = Vec::with_capacity(cfg.tasks.len());
    for (k, ((train, test), (ctr, cte))) in data.iter().zip(&cleaned).enumerate() {
        let enc = |d: &Dataset, c: &[crate::preprocess::CleanedText]| {
            d.examples
                .iter()
                .zip(c)
                .map(|(e, c)| encoder.encode(c, e.label, k))
                .collect::<Vec<_>>()
        };
        let tc = &cfg.tasks[k];
        tasks.push(PreparedTask {
            spec: TaskSpec {
                name: tc.name.clone(),
                labels: train.labels.clone(),
            },
            role: tc.role,
            weight: tc.weight,
            train: enc(train, ctr),
            test: test.as_ref().zip(cte.as_ref()).map(|(d, c)| enc(d, c)),
        });
    }
    Ok(Prepared {
        tasks,
        encoder,
        input,
        net,
        events,
    })
}

/// One task's examples for one protocol run.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
    pub eval: Vec<EncodedExample>,
}

impl Split {
    fn data(&self) -> TaskData<'_> {
        TaskData {
            train: &self.train,
            val: &self.val,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelKind {
    Single { architecture: Architecture },
    SharedBackbone { tasks: Vec<TaskSpec> },
    DerivedHead { backbone: Vec<TaskSpec> },
    Concat { a: Vec<TaskSpec>, b: Vec<TaskSpec> },
    SoftShared { tasks: Vec<TaskSpec> },
}

/// How to rebuild a saved model: its kind, the task it answers (if one)
/// and the file holding its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub kind: ModelKind,
    pub tasks: Vec<String>,
}

pub struct TrainedModel {
    pub record: ModelRecord,
    pub store: ParamStore,
}

#[derive(Default)]
pub struct ProtocolOutput {
    /// Confusion matrix per task index, for reported tasks with evaluation
    /// examples.
    pub confusions: Vec<Option<ConfusionMatrix>>,
    pub history: Vec<EpochRecord>,
    pub models: Vec<TrainedModel>,
    pub events: Vec<String>,
}

struct Protocol<'a> {
    cfg: &'a RunConfig,
    prep: &'a Prepared,
    splits: &'a [Split],
    seed: u64,
    keep: bool,
    out: ProtocolOutput,
}

impl<'a> Protocol<'a> {
    fn train_config(&self, label: &str, tasks: &[usize]) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &format!("train/{label}")),
            task_weights: tasks.iter().map(|&t| self.prep.tasks[t].weight).collect(),
            ..self.cfg.train_config()
        }
    }

    fn init_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, &format!("init/{label}"))
    }

    fn name(&self, t: usize) -> &str {
        &self.prep.tasks[t].spec.name
    }

    fn specs(&self, tasks: &[usize]) -> Vec<TaskSpec> {
        tasks.iter().map(|&t| self.prep.tasks[t].spec.clone()).collect()
    }

    fn record_eval(&mut self, t: usize, model: &Model, store: &ParamStore, head: usize) -> Result<()> {
        let split = &self.splits[t];
        if !split.eval.is_empty() {
            let cm = evaluate(model, store, head, &self.prep.tasks[t].spec.labels, &split.eval)?;
            self.out.confusions[t] = Some(cm);
        }
        Ok(())
    }

    fn keep(&mut self, name: String, kind: ModelKind, tasks: Vec<String>, store: &ParamStore) {
        if self.keep {
            self.out.models.push(TrainedModel {
                record: ModelRecord { name, kind, tasks },
                store: store.clone(),
            });
        }
    }

    fn single(&mut self, arch: Architecture, t: usize) -> Result<()> {
        let label = self.name(t).to_string();
        let mut store = ParamStore::new();
        let m = build_single_task(
            arch,
            &self.prep.net,
            &self.prep.input,
            &self.prep.tasks[t].spec,
            &mut store,
            self.init_seed(&label),
        )?;
        let out = train_stl(
            &m,
            &mut store,
            0,
            self.splits[t].data(),
            &self.train_config(&label, &[t]),
        )?;
        self.out.history.extend(out.history);
        self.record_eval(t, &m, &store, 0)?;
        self.keep(
            format!("{label}.single"),
            ModelKind::Single { architecture: arch },
            vec![label],
            &store,
        );
        Ok(())
    }

    fn shared(&mut self, tasks: &[usize], label: &str) -> Result<(crate::models::SharedNetwork, ParamStore)> {
        let mut store = ParamStore::new();
        let sn = build_shared_network(
            &self.prep.net,
            &self.prep.input,
            &self.specs(tasks),
            &mut store,
            self.init_seed(label),
        )?;
        let data: Vec<TaskData> = tasks.iter().map(|&t| self.splits[t].data()).collect();
        let out = train_shared_network(&sn, &mut store, &data, &self.train_config(label, tasks))?;
        self.out.history.extend(out.history);
        let names = tasks.iter().map(|&t| self.name(t).to_string()).collect();
        self.keep(
            label.to_string(),
            ModelKind::SharedBackbone {
                tasks: self.specs(tasks),
            },
            names,
            &store,
        );
        Ok((sn, store))
    }

    fn head(
        &mut self,
        sn: &crate::models::SharedNetwork,
        sn_store: &ParamStore,
        t: usize,
        backbone: &str,
    ) -> Result<()> {
        let label = format!("{}.head.{backbone}", self.name(t));
        let mut h = derive_task_head(
            sn,
            sn_store,
            &self.prep.input,
            &self.prep.tasks[t].spec,
            self.init_seed(&label),
        )?;
        if h.new_task {
            self.out
                .events
                .push(format!("{label}: task was not among the backbone's tasks"));
        }
        let out = train_stl(
            &h.model,
            &mut h.store,
            0,
            self.splits[t].data(),
            &self.train_config(&label, &[t]),
        )?;
        self.out.history.extend(out.history);
        self.record_eval(t, &h.model, &h.store, 0)?;
        let kind = ModelKind::DerivedHead {
            backbone: sn.tasks.clone(),
        };
        self.keep(label, kind, vec![self.name(t).to_string()], &h.store);
        Ok(())
    }

    fn soft(&mut self, tasks: &[usize], label: &str, report: &[usize]) -> Result<()> {
        let mut store = ParamStore::new();
        let seeds: Vec<u64> = tasks
            .iter()
            .map(|&t| self.init_seed(&format!("{label}/{}", self.name(t))))
            .collect();
        let ssn = build_soft_shared(&self.prep.net, &self.prep.input, &self.specs(tasks), &mut store, &seeds)?;
        let data: Vec<TaskData> = tasks.iter().map(|&t| self.splits[t].data()).collect();
        let out = train_soft_shared(&ssn, &mut store, &data, &self.train_config(label, tasks))?;
        for p in out.pretrain {
            self.out.history.extend(p.history);
        }
        self.out.history.extend(out.joint.history);
        for (h, &t) in tasks.iter().enumerate() {
            if report.contains(&t) {
                self.record_eval(t, &ssn.model, &store, h)?;
            }
        }
        let names = tasks.iter().map(|&t| self.name(t).to_string()).collect();
        self.keep(
            label.to_string(),
            ModelKind::SoftShared {
                tasks: self.specs(tasks),
            },
            names,
            &store,
        );
        Ok(())
    }

    fn run(mut self) -> Result<ProtocolOutput> {
        let cfg = self.cfg;
        let reported = cfg.reported_tasks();
        let hate = cfg.hate_tasks();
        let sentiment = cfg.sentiment_tasks();
        let with_sentiment = |t: usize| std::iter::once(t).chain(sentiment.iter().copied()).collect::<Vec<_>>();
        self.out.confusions = vec![None; self.prep.tasks.len()];
        match cfg.variant {
            1..=5 => {
                let arch = cfg.model_spec(self.prep.net.seq_len, vec![]).architecture();
                for &t in &reported {
                    self.single(arch, t)?;
                }
            }
            6 => {
                let (sn, store) = self.shared(&hate, "sn.hate")?;
                for &t in &hate {
                    self.head(&sn, &store, t, "sn.hate")?;
                }
            }
            7 => {
                for &t in &hate {
                    let label = format!("sn.{}+sentiment", self.name(t));
                    let (sn, store) = self.shared(&with_sentiment(t), &label)?;
                    self.head(&sn, &store, t, &label)?;
                }
            }
            8 => {
                let (sn_a, store_a) = self.shared(&hate, "sn.hate")?;
                for &t in &hate {
                    let label_b = format!("sn.{}+sentiment", self.name(t));
                    let (sn_b, store_b) = self.shared(&with_sentiment(t), &label_b)?;
                    let label = format!("{}.concat", self.name(t));
                    let spec = &self.prep.tasks[t].spec;
                    let mut h = build_concat_model(
                        (&sn_a, &store_a),
                        (&sn_b, &store_b),
                        &self.prep.input,
                        spec,
                        self.init_seed(&label),
                    )?;
                    let out = train_stl(
                        &h.model,
                        &mut h.store,
                        0,
                        self.splits[t].data(),
                        &self.train_config(&label, &[t]),
                    )?;
                    self.out.history.extend(out.history);
                    self.record_eval(t, &h.model, &h.store, 0)?;
                    let kind = ModelKind::Concat {
                        a: sn_a.tasks.clone(),
                        b: sn_b.tasks.clone(),
                    };
                    self.keep(label, kind, vec![self.name(t).to_string()], &h.store);
                }
            }
            9 => self.soft(&hate, "soft.hate", &hate)?,
            10 => {
                for &t in &hate {
                    let label = format!("soft.{}+sentiment", self.name(t));
                    self.soft(&with_sentiment(t), &label, &[t])?;
                }
            }
            v => return Err(Error::Config(format!("unknown variant {v}"))),
        }
        Ok(self.out)
    }
}

/// Trains and evaluates the configured variant on the given splits.
pub fn run_protocol(
    cfg: &RunConfig,
    prep: &Prepared,
    splits: &[Split],
    seed: u64,
    keep: bool,
) -> Result<ProtocolOutput> {
    Protocol {
        cfg,
        prep,
        splits,
        seed,
        keep,
        out: ProtocolOutput::default(),
    }
    .run()
}

fn pick(examples: &[EncodedExample], idx: &[usize]) -> Vec<EncodedExample> {
    idx.iter().map(|&i| examples[i].clone()).collect()
}

fn holdout(
    cfg: &RunConfig,
    task: &PreparedTask,
    idx: &[usize],
    label: &str,
) -> (Vec<EncodedExample>, Vec<EncodedExample>) {
    let (tr, val) = stratified_holdout(
        idx,
        &task.labels(),
        task.spec.classes(),
        cfg.val_fraction,
        derive_seed(cfg.seed, &format!("holdout/{}/{label}", task.spec.name)),
    );
    (pick(&task.train, &tr), pick(&task.train, &val))
}

/// Fold plans, one per task, aligned by fold index.
pub fn fold_plans(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<FoldPlan>> {
    prep.tasks
        .iter()
        .map(|t| {
            stratified_kfold(
                &t.labels(),
                &t.spec.labels,
                cfg.folds,
                derive_seed(cfg.seed, &format!("folds/{}", t.spec.name)),
            )
            .map_err(|e| e.in_stage(&format!("folds for {}", t.spec.name)))
        })
        .collect()
}

/// Splits for fold `f`: train minus the fold (less a validation slice),
/// evaluated on the fold.
pub fn fold_splits(cfg: &RunConfig, prep: &Prepared, plans: &[FoldPlan], f: usize) -> Vec<Split> {
    prep.tasks
        .iter()
        .zip(plans)
        .map(|(t, plan)| {
            let (train, val) = holdout(cfg, t, &plan.train_indices(f), &format!("fold{f}"));
            Split {
                train,
                val,
                eval: pick(&t.train, &plan.test_indices(f)),
            }
        })
        .collect()
}

/// Splits for a final run: all training data (less a validation slice),
/// evaluated on the official test split where one exists.
pub fn final_splits(cfg: &RunConfig, prep: &Prepared) -> Vec<Split> {
    prep.tasks
        .iter()
        .map(|t| {
            let all: Vec<usize> = (0..t.train.len()).collect();
            let (train, val) = holdout(cfg, t, &all, "final");
            Split {
                train,
                val,
                eval: t.test.clone().unwrap_or_default(),
            }
        })
        .collect()
}

pub struct CrossValidation {
    pub report: Report,
    pub history: Vec<EpochRecord>,
}

/// k-fold cross-validation of the configured variant, plus official-test
/// evaluation (trained on the full training data) for tasks that have one.
pub fn cross_validate(cfg: &RunConfig, prep: &Prepared) -> Result<CrossValidation> {
    let plans = fold_plans(cfg, prep)?;
    let mut events = prep.events.clone();
    for (t, p) in prep.tasks.iter().zip(&plans) {
        for c in &p.sparse_classes {
            events.push(format!(
                "{}: class '{c}' has fewer than {} examples; some folds lack it",
                t.spec.name, cfg.folds
            ));
        }
    }
    let reported = cfg.reported_tasks();
    let mut per_fold: Vec<Vec<ConfusionMatrix>> = vec![Vec::new(); prep.tasks.len()];
    let mut history = Vec::new();
    for f in 0..cfg.folds {
        let splits = fold_splits(cfg, prep, &plans, f);
        let out = run_protocol(cfg, prep, &splits, derive_seed(cfg.seed, &format!("fold{f}")), false)
            .map_err(|e| e.in_stage(&format!("fold {}", f + 1)))?;
        for (t, cm) in out.confusions.into_iter().enumerate() {
            if let Some(cm) = cm {
                per_fold[t].push(cm);
            }
        }
        events.extend(out.events.into_iter().map(|e| format!("fold {}: {e}", f + 1)));
        history.extend(out.history.into_iter().map(|mut r| {
            r.phase = format!("fold{}/{}", f + 1, r.phase);
            r
        }));
    }
    let mut tests: Vec<Option<ConfusionMatrix>> = vec![None; prep.tasks.len()];
    if reported.iter().any(|&t| prep.tasks[t].test.is_some()) {
        let splits = final_splits(cfg, prep);
        let out = run_protocol(cfg, prep, &splits, derive_seed(cfg.seed, "final"), false)
            .map_err(|e| e.in_stage("official test"))?;
        tests = out.confusions;
        events.extend(out.events.into_iter().map(|e| format!("test: {e}")));
        history.extend(out.history.into_iter().map(|mut r| {
            r.phase = format!("final/{}", r.phase);
            r
        }));
    }
    let mut report = Report::new(cfg.variant, cfg.seed, cfg.folds, cfg.echo());
    report
        .config
        .insert("seq_len.effective".into(), prep.net.seq_len.to_string());
    for &t in &reported {
        let task = &prep.tasks[t];
        let folds = std::mem::take(&mut per_fold[t]);
        let tr = TaskReport::from_folds(&task.spec.name, &task.spec.labels, folds, tests[t].take())
            .map_err(|e| e.in_stage(&format!("report for {}", task.spec.name)))?;
        for (what, ev) in tr
            .folds
            .iter()
            .map(|f| (format!("fold {}", f.fold), &f.eval))
            .chain(tr.test.iter().map(|e| ("test".to_string(), e)))
        {
            if !ev.zero_division.is_empty() {
                events.push(format!(
                    "{} {what}: zero denominators set to 0 for {}",
                    task.spec.name,
                    ev.zero_division.join(", ")
                ));
            }
        }
        if tr.aggregation_flagged {
            events.push(format!(
                "{}: fold-mean and pooled scores differ by {:.4} points; both are reported",
                task.spec.name, tr.aggregation_gap_pp
            ));
        }
        report.tasks.push(tr);
    }
    report.events = events;
    Ok(CrossValidation { report, history })
}

/// Description of a saved run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub variant: u8,
    pub seed: u64,
    pub net: NetConfig,
    pub tasks: Vec<TaskSpec>,
    pub trainable_subwords: bool,
    pub models: Vec<ModelRecord>,
}

pub const MANIFEST_FORMAT: &str = "mtltext-model/1";
const INPUTS_FILE: &str = "inputs.bin";
const VOCAB_FILE: &str = "vocab.txt";
const BAGS_FILE: &str = "bags.txt";
const SUBWORD_TABLE: &str = "embed.subword";
const MANIFEST_FILE: &str = "model.json";

pub struct FinalRun {
    pub models: Vec<TrainedModel>,
    pub tests: Vec<(String, EvalRecord)>,
    pub history: Vec<EpochRecord>,
    pub events: Vec<String>,
}

/// Trains the configured variant on all training data.
pub fn train_final(cfg: &RunConfig, prep: &Prepared) -> Result<FinalRun> {
    let splits = final_splits(cfg, prep);
    let out = run_protocol(cfg, prep, &splits, derive_seed(cfg.seed, "final"), true)?;
    let mut tests = Vec::new();
    for (t, cm) in out.confusions.into_iter().enumerate() {
        if let Some(cm) = cm {
            tests.push((prep.tasks[t].spec.name.clone(), EvalRecord::new(cm)?));
        }
    }
    Ok(FinalRun {
        models: out.models,
        tests,
        history: out.history,
        events: out.events,
    })
}

fn without_table(store: &ParamStore) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (_, p) in store.iter().filter(|(_, p)| p.name != EMBED_TABLE) {
        s.add(p.name.clone(), p.tensor.clone())?;
    }
    Ok(s)
}

/// Writes the manifest, vocabulary, input table and one weight file per
/// model into `dir`. Returns the files written.
pub fn save_run(dir: &Path, cfg: &RunConfig, prep: &Prepared, models: &[TrainedModel]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    let mut inputs = ParamStore::new();
    inputs.add(EMBED_TABLE, prep.input.table.clone())?;
    if let Some(sub) = &prep.input.subword {
        inputs.add(SUBWORD_TABLE, sub.table.clone())?;
        put(BAGS_FILE, bags_text(&sub.bags).into_bytes())?;
    }
    put(INPUTS_FILE, encode_weights(&inputs))?;
    put(VOCAB_FILE, prep.encoder.vocab.to_text().into_bytes())?;
    for m in models {
        put(
            &format!("{}.bin", m.record.name),
            encode_weights(&without_table(&m.store)?),
        )?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        variant: cfg.variant,
        seed: cfg.seed,
        net: prep.net.clone(),
        tasks: prep.tasks.iter().map(|t| t.spec.clone()).collect(),
        trainable_subwords: cfg.trainable_subwords,
        models: models.iter().map(|m| m.record.clone()).collect(),
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    json.push('\n');
    put(MANIFEST_FILE, json.into_bytes())?;
    Ok(written)
}

/// A saved run, ready to predict.
pub struct LoadedRun {
    pub manifest: Manifest,
    pub encoder: Encoder,
    pub input: EmbeddingInput,
    pub models: Vec<(ModelRecord, Model, ParamStore)>,
}

fn read_weights(path: &Path) -> Result<WeightSet> {
    let bytes = fs::read(path).map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    decode_weights(&bytes, &path.display().to_string())
}

/// Rebuilds the graph of a saved model and loads its weights.
pub fn rebuild(
    record: &ModelRecord,
    manifest: &Manifest,
    input: &EmbeddingInput,
    weights: &WeightSet,
) -> Result<(Model, ParamStore)> {
    let net = &manifest.net;
    let task_spec = |name: &str| {
        manifest
            .tasks
            .iter()
            .find(|t| t.name == name)
            .cloned()
            .ok_or_else(|| Error::Weights(format!("manifest has no task '{name}'")))
    };
    let (model, mut store) = match &record.kind {
        ModelKind::Single { architecture } => {
            let mut store = ParamStore::new();
            let m = build_single_task(*architecture, net, input, &task_spec(&record.tasks[0])?, &mut store, 0)?;
            (m, store)
        }
        ModelKind::SharedBackbone { tasks } => {
            let mut store = ParamStore::new();
            let sn = build_shared_network(net, input, tasks, &mut store, 0)?;
            (sn.model, store)
        }
        ModelKind::DerivedHead { backbone } => {
            let mut s = ParamStore::new();
            let sn = build_shared_network(net, input, backbone, &mut s, 0)?;
            let h = derive_task_head(&sn, &s, input, &task_spec(&record.tasks[0])?, 0)?;
            (h.model, h.store)
        }
        ModelKind::Concat { a, b } => {
            let (mut sa, mut sb) = (ParamStore::new(), ParamStore::new());
            let na = build_shared_network(net, input, a, &mut sa, 0)?;
            let nb = build_shared_network(net, input, b, &mut sb, 0)?;
            let h = build_concat_model((&na, &sa), (&nb, &sb), input, &task_spec(&record.tasks[0])?, 0)?;
            (h.model, h.store)
        }
        ModelKind::SoftShared { tasks } => {
            let mut store = ParamStore::new();
            let ssn = build_soft_shared(net, input, tasks, &mut store, &vec![0; tasks.len()])?;
            (ssn.model, store)
        }
    };
    let mut full = weights.clone();
    if store.id(EMBED_TABLE).is_some() {
        full.push((EMBED_TABLE.to_string(), input.table.clone()));
    }
    apply_weights(&mut store, &full)?;
    Ok((model, store))
}

fn bags_text(bags: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for bag in bags {
        let row: Vec<String> = bag.iter().map(|r| r.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn parse_bags(text: &str, rows: usize) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|r| match r.parse::<usize>() {
                    Ok(r) if r < rows => Ok(r),
                    _ => Err(Error::parse(BAGS_FILE, i + 1, format!("bad subword row '{r}'"))),
                })
                .collect()
        })
        .collect()
}

/// Loads a run saved by [`save_run`].
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Weights(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Weights(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Weights(format!(
            "unsupported model format '{}'",
            manifest.format
        )));
    }
    let vocab_text = fs::read_to_string(dir.join(VOCAB_FILE))?;
    let vocab = Vocab::from_text(&vocab_text)?;
    let mut inputs = read_weights(&dir.join(INPUTS_FILE))?;
    let mut take = |name: &str| {
        let i = inputs.iter().position(|(n, _)| n == name)?;
        Some(inputs.remove(i).1)
    };
    let table = take(EMBED_TABLE).ok_or_else(|| Error::Weights(format!("{INPUTS_FILE} holds no '{EMBED_TABLE}'")))?;
    let subword = take(SUBWORD_TABLE);
    if table.rows() != vocab.len() {
        return Err(Error::Weights(format!(
            "input table has {} rows but the vocabulary has {}",
            table.rows(),
            vocab.len()
        )));
    }
    let input = match (manifest.trainable_subwords, subword) {
        (false, _) => EmbeddingInput::fixed(table),
        (true, Some(sub)) => {
            let bags = parse_bags(&fs::read_to_string(dir.join(BAGS_FILE))?, sub.rows())?;
            if bags.len() != vocab.len() {
                return Err(Error::Weights(format!(
                    "{BAGS_FILE} has {} rows but the vocabulary has {}",
                    bags.len(),
                    vocab.len()
                )));
            }
            EmbeddingInput {
                table,
                subword: Some(SubwordInput {
                    table: sub,
                    bags: Arc::new(bags),
                }),
            }
        }
        (true, None) => return Err(Error::Weights(format!("{INPUTS_FILE} holds no '{SUBWORD_TABLE}'"))),
    };
    let mut models = Vec::new();
    for record in &manifest.models {
        let weights = read_weights(&dir.join(format!("{}.bin", record.name)))?;
        let (m, s) = rebuild(record, &manifest, &input, &weights)?;
        models.push((record.clone(), m, s));
    }
    let encoder = Encoder {
        vocab,
        seq_len: manifest.net.seq_len,
        char_len: manifest.net.char_len,
    };
    Ok(LoadedRun {
        manifest,
        encoder,
        input,
        models,
    })
}

impl LoadedRun {
    /// The model answering `task` (a head or single-task model, else a
    /// multi-output model that includes it) and its head index.
    pub fn model_for(&self, task: &str) -> Option<(&Model, &ParamStore, usize)> {
        let mut best: Option<(&Model, &ParamStore, usize)> = None;
        for (r, m, s) in &self.models {
            if let Some(h) = m.head_index(task) {
                let exact = !matches!(r.kind, ModelKind::SharedBackbone { .. } | ModelKind::SoftShared { .. });
                if exact {
                    return Some((m, s, h));
                }
                best = best.or(Some((m, s, h)));
            }
        }
        best
    }

    /// Scores a labeled file with the model for `task`.
    pub fn evaluate_file(&self, task: &str, path: &Path, pre: &Preprocessor) -> Result<EvalRecord> {
        let spec = self
            .manifest
            .tasks
            .iter()
            .find(|t| t.name == task)
            .ok_or_else(|| Error::Config(format!("saved run has no task '{task}'")))?;
        let (model, store, head) = self
            .model_for(task)
            .ok_or_else(|| Error::Config(format!("no saved model answers task '{task}'")))?;
        let data = load_dataset(path, Some(&spec.labels))?;
        let examples: Vec<EncodedExample> = data
            .examples
            .iter()
            .map(|e| self.encoder.encode(&pre.run(&e.text), e.label, 0))
            .collect();
        EvalRecord::new(evaluate(model, store, head, &spec.labels, &examples)?)
    }
}

/// Exclusive use of an output directory for one run. Files registered with
/// [`OutputDir::track`] are removed if the run is abandoned.
pub struct OutputDir {
    pub path: PathBuf,
    lock: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        let created_dir = !path.exists();
        fs::create_dir_all(path)?;
        let lock = path.join(".mtltext.lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                Error::Config(format!(
                    "{}: output directory is in use by another run ({e}); remove the lock file if that run is gone",
                    path.display()
                ))
            })?;
        Ok(OutputDir {
            path: path.to_path_buf(),
            lock,
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn track(&mut self, files: impl IntoIterator<Item = PathBuf>) {
        self.files.extend(files);
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, contents)?;
        self.files.push(p);
        Ok(())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
        let _ = fs::remove_file(&self.lock);
        if !self.committed && self.created_dir {
            let _ = fs::remove_dir(&self.path);
        }
    }
}

pub fn history_text(history: &[EpochRecord]) -> String {
    let mut s = String::new();
    for r in history {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Cross-validation report plus final weights, written to the configured
/// output directory. Nothing is left behind if any stage fails.
fn open_run(cfg: &RunConfig) -> Result<(OutputDir, Prepared)> {
    cfg.validate()?;
    let dir = cfg
        .output
        .as_ref()
        .ok_or_else(|| Error::Config("no output directory configured".into()))?;
    let out = OutputDir::acquire(dir)?;
    let res = load_resources(cfg).map_err(|e| e.in_stage("load resources"))?;
    let prep = prepare(cfg, &res, None)?;
    Ok((out, prep))
}

fn write_cross_validation(out: &mut OutputDir, cfg: &RunConfig, prep: &Prepared) -> Result<Report> {
    let cv = cross_validate(cfg, prep)?;
    cv.report.emit(&out.path)?;
    out.track(["report.json", "report.txt", "report.csv"].map(|n| out.path.join(n)));
    out.write("history.log", history_text(&cv.history))?;
    Ok(cv.report)
}

fn write_final(out: &mut OutputDir, cfg: &RunConfig, prep: &Prepared) -> Result<FinalRun> {
    let fin = train_final(cfg, prep).map_err(|e| e.in_stage("final training"))?;
    let files = save_run(&out.path, cfg, prep, &fin.models).map_err(|e| e.in_stage("save weights"))?;
    out.track(files);
    out.write("final.log", history_text(&fin.history))?;
    if !fin.tests.is_empty() {
        let tests: BTreeMap<&str, &EvalRecord> = fin.tests.iter().map(|(t, r)| (t.as_str(), r)).collect();
        let json = serde_json::to_string_pretty(&tests).map_err(|e| Error::Data(e.to_string()))?;
        out.write("test.json", json + "\n")?;
    }
    Ok(fin)
}

/// Cross-validation only: writes the report files and `history.log`.
pub fn run_cross_validation(cfg: &RunConfig) -> Result<Report> {
    let (mut out, prep) = open_run(cfg)?;
    let report = write_cross_validation(&mut out, cfg, &prep)?;
    out.commit();
    Ok(report)
}

/// Final training only: writes the saved model, `final.log` and, when test
/// files are configured, `test.json`.
pub fn run_training(cfg: &RunConfig) -> Result<FinalRun> {
    let (mut out, prep) = open_run(cfg)?;
    let fin = write_final(&mut out, cfg, &prep)?;
    out.commit();
    Ok(fin)
}

/// Cross-validation followed by final training, all in one output directory.
pub fn run_experiment(cfg: &RunConfig) -> Result<Report> {
    let (mut out, prep) = open_run(cfg)?;
    let report = write_cross_validation(&mut out, cfg, &prep)?;
    write_final(&mut out, cfg, &prep)?;
    out.commit();
    Ok(report)
}
