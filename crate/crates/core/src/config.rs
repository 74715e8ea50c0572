//! Run configuration: `key = value` lines with `#` comments.
//!
//! ```text
//! variant = 6
//! seed = 7
//! task.D1 = hate:data/d1.csv
//! task.D1.test = data/d1_test.csv
//! task.S1 = sentiment:data/s1.csv
//! windows = 3,4,5
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CharCnnSpec, InitMode, ModelSpec, NetConfig, TaskSpec, WordCnnSpec};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

/// Directory searched for resource files the config does not name.
pub const RESOURCES_ENV: &str = "MTLTEXT_RESOURCES";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Hate,
    Sentiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub name: String,
    pub role: Role,
    pub path: PathBuf,
    pub test: Option<PathBuf>,
    pub labels: Option<Vec<String>>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub variant: u8,
    pub seed: u64,
    pub tasks: Vec<TaskConfig>,
    pub output: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub emoticons: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub subwords: Option<PathBuf>,
    pub word_dim: usize,
    pub subword_dim: usize,
    pub subword_buckets: usize,
    pub trainable_subwords: bool,
    /// 0 selects the 95th-percentile rule.
    pub seq_len: usize,
    pub char_len: usize,
    pub word: WordCnnSpec,
    pub char: CharCnnSpec,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub folds: usize,
    pub val_fraction: f64,
    pub search_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            variant: 2,
            seed: 0,
            tasks: Vec::new(),
            output: None,
            lexicon: None,
            emoticons: None,
            embeddings: None,
            subwords: None,
            word_dim: 300,
            subword_dim: 300,
            subword_buckets: 20_000,
            trainable_subwords: false,
            seq_len: 0,
            char_len: 256,
            word: WordCnnSpec::default(),
            char: CharCnnSpec::default(),
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            adam: t.adam,
            folds: 5,
            val_fraction: 0.1,
            search_budget: 10,
        }
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("bad list item '{s}'")))
        .collect()
}

fn one<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("bad value '{v}'"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

impl RunConfig {
    /// Parses a config document. Relative paths resolve against `base`.
    pub fn parse(text: &str, source: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.update(text, source, base)?;
        Ok(cfg)
    }

    /// Applies a config document on top of the current values. Tasks already
    /// present keep their order; later keys override earlier ones.
    pub fn update(&mut self, text: &str, source: &str, base: &Path) -> Result<()> {
        let cfg = self;
        let mut tasks: BTreeMap<String, (usize, TaskConfig)> = cfg
            .tasks
            .drain(..)
            .enumerate()
            .map(|(i, t)| (t.name.clone(), (i, t)))
            .collect();
        let first_line = tasks.len();
        let mut extras: Vec<(usize, String, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{line_no}: expected 'key = value'")))?;
            let (key, value) = (key.trim(), value.trim());
            let at = |m: String| Error::Config(format!("{source}:{line_no}: {key}: {m}"));
            let path = |v: &str| base.join(v);
            if let Some(rest) = key.strip_prefix("task.") {
                match rest.split_once('.') {
                    None => {
                        let (role, p) = value
                            .split_once(':')
                            .ok_or_else(|| at("expected '<hate|sentiment>:<path>'".into()))?;
                        let role = match role.trim() {
                            "hate" => Role::Hate,
                            "sentiment" => Role::Sentiment,
                            r => return Err(at(format!("unknown role '{r}'"))),
                        };
                        let t = TaskConfig {
                            name: rest.to_string(),
                            role,
                            path: path(p.trim()),
                            test: None,
                            labels: None,
                            weight: 1.0,
                        };
                        if tasks.insert(rest.to_string(), (first_line + line_no, t)).is_some() {
                            return Err(at("task declared twice".into()));
                        }
                    }
                    Some((name, field)) => {
                        extras.push((line_no, name.to_string(), field.to_string(), value.to_string()))
                    }
                }
                continue;
            }
            match key {
                "variant" => cfg.variant = one(value).map_err(at)?,
                "seed" => cfg.seed = one(value).map_err(at)?,
                "output" => cfg.output = Some(path(value)),
                "lexicon" => cfg.lexicon = Some(path(value)),
                "emoticons" => cfg.emoticons = Some(path(value)),
                "embeddings" => cfg.embeddings = Some(path(value)),
                "subwords" => cfg.subwords = Some(path(value)),
                "word_dim" => cfg.word_dim = one(value).map_err(at)?,
                "subword_dim" => cfg.subword_dim = one(value).map_err(at)?,
                "subword_buckets" => cfg.subword_buckets = one(value).map_err(at)?,
                "trainable_subwords" => cfg.trainable_subwords = flag(value).map_err(at)?,
                "seq_len" => cfg.seq_len = one(value).map_err(at)?,
                "char_len" => cfg.char_len = one(value).map_err(at)?,
                "windows" => cfg.word.windows = list(value).map_err(at)?,
                "word_filters" => cfg.word.filters = one(value).map_err(at)?,
                "hidden" => cfg.word.hidden = list(value).map_err(at)?,
                "char_kernel" => cfg.char.kernel = one(value).map_err(at)?,
                "char_strides" => {
                    let s: Vec<usize> = list(value).map_err(at)?;
                    cfg.char.strides = s.try_into().map_err(|_| at("expected two strides".into()))?;
                }
                "char_pool" => cfg.char.pool = one(value).map_err(at)?,
                "char_filters" => cfg.char.filters = one(value).map_err(at)?,
                "char_hidden" => cfg.char.hidden = one(value).map_err(at)?,
                "batch_size" => cfg.batch_size = one(value).map_err(at)?,
                "max_epochs" => cfg.max_epochs = one(value).map_err(at)?,
                "patience" => cfg.patience = one(value).map_err(at)?,
                "lr" => cfg.adam.lr = one(value).map_err(at)?,
                "beta1" => cfg.adam.beta1 = one(value).map_err(at)?,
                "beta2" => cfg.adam.beta2 = one(value).map_err(at)?,
                "epsilon" => cfg.adam.epsilon = one(value).map_err(at)?,
                "folds" => cfg.folds = one(value).map_err(at)?,
                "val_fraction" => cfg.val_fraction = one(value).map_err(at)?,
                "search_budget" => cfg.search_budget = one(value).map_err(at)?,
                _ => return Err(at("unknown key".into())),
            }
        }
        for (line_no, name, field, value) in extras {
            let at = |m: String| Error::Config(format!("{source}:{line_no}: task.{name}.{field}: {m}"));
            let (_, t) = tasks.get_mut(&name).ok_or_else(|| at("task not declared".into()))?;
            match field.as_str() {
                "test" => t.test = Some(base.join(&value)),
                "labels" => t.labels = Some(list(&value).map_err(at)?),
                "weight" => t.weight = one(&value).map_err(at)?,
                _ => return Err(at("unknown task field".into())),
            }
        }
        let mut ordered: Vec<(usize, TaskConfig)> = tasks.into_values().collect();
        ordered.sort_by_key(|(line, _)| *line);
        cfg.tasks = ordered.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, &path.display().to_string(), base)
    }

    /// Fills unset resource paths from the resource directory, when the
    /// standard file names exist there.
    pub fn apply_resource_dir(&mut self, dir: &Path) {
        let pick = |slot: &mut Option<PathBuf>, name: &str| {
            let candidate = dir.join(name);
            if slot.is_none() && candidate.is_file() {
                *slot = Some(candidate);
            }
        };
        pick(&mut self.lexicon, "lexicon.tsv");
        pick(&mut self.emoticons, "emoticons.tsv");
        pick(&mut self.embeddings, "vectors.txt");
        pick(&mut self.subwords, "subwords.txt");
    }

    pub fn apply_resource_env(&mut self) {
        if let Some(dir) = std::env::var_os(RESOURCES_ENV) {
            self.apply_resource_dir(Path::new(&dir));
        }
    }

    pub fn hate_tasks(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| self.tasks[i].role == Role::Hate)
            .collect()
    }

    pub fn sentiment_tasks(&self) -> Vec<usize> {
        (0..self.tasks.len())
            .filter(|&i| self.tasks[i].role == Role::Sentiment)
            .collect()
    }

    /// Tasks whose scores are reported: the hate tasks, or every task when
    /// none is marked hate.
    pub fn reported_tasks(&self) -> Vec<usize> {
        let hate = self.hate_tasks();
        if hate.is_empty() {
            (0..self.tasks.len()).collect()
        } else {
            hate
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            adam: self.adam,
            task_weights: self.tasks.iter().map(|t| t.weight).collect(),
        }
    }

    pub fn net_config(&self, seq_len: usize) -> NetConfig {
        NetConfig {
            seq_len,
            char_len: self.char_len,
            word: self.word.clone(),
            char: self.char.clone(),
        }
    }

    pub fn init_mode(&self) -> InitMode {
        if self.variant == 1 {
            InitMode::RandomStatic
        } else {
            InitMode::PretrainedStatic
        }
    }

    /// Checks variant requirements and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config(
                "no tasks configured (use task.<name> = <role>:<path>)".into(),
            ));
        }
        let (hate, sent) = (self.hate_tasks().len(), self.sentiment_tasks().len());
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("variant {} needs {what}", self.variant)))
            }
        };
        match self.variant {
            1..=5 => Ok(()),
            6 | 9 => need(hate >= 2, "at least two hate tasks"),
            7 | 10 => need(hate >= 1 && sent >= 1, "a hate task and at least one sentiment task"),
            8 => need(
                hate >= 2 && sent >= 1,
                "two hate tasks and a sentiment task for its two backbones",
            ),
            v => Err(Error::Config(format!("variant must be 1..=10, got {v}"))),
        }?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.word.windows.is_empty() || self.word.filters == 0 {
            return Err(Error::Config("need at least one window and one filter".into()));
        }
        if self.subword_dim == 0 && self.word_dim == 0 {
            return Err(Error::Config("input vectors need a positive dimension".into()));
        }
        self.train_config().validate()?;
        let files = self
            .tasks
            .iter()
            .flat_map(|t| std::iter::once(&t.path).chain(t.test.as_ref()))
            .chain(self.lexicon.iter())
            .chain(self.emoticons.iter())
            .chain(self.embeddings.iter())
            .chain(self.subwords.iter());
        for f in files {
            if !f.is_file() {
                return Err(Error::Config(format!("file not found: {}", f.display())));
            }
        }
        Ok(())
    }

    /// Model spec for one reported task set.
    pub fn model_spec(&self, seq_len: usize, tasks: Vec<TaskSpec>) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            net: self.net_config(seq_len),
            tasks,
            init: self.init_mode(),
            trainable_subwords: self.trainable_subwords,
        }
    }

    /// Flat `key = value` echo, paths included, output directory excluded.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let p = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        m.insert("variant".into(), self.variant.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("lexicon".into(), p(&self.lexicon));
        m.insert("emoticons".into(), p(&self.emoticons));
        m.insert("embeddings".into(), p(&self.embeddings));
        m.insert("subwords".into(), p(&self.subwords));
        m.insert("word_dim".into(), self.word_dim.to_string());
        m.insert("subword_dim".into(), self.subword_dim.to_string());
        m.insert("subword_buckets".into(), self.subword_buckets.to_string());
        m.insert("trainable_subwords".into(), self.trainable_subwords.to_string());
        m.insert("seq_len".into(), self.seq_len.to_string());
        m.insert("char_len".into(), self.char_len.to_string());
        m.insert("windows".into(), join(&self.word.windows));
        m.insert("word_filters".into(), self.word.filters.to_string());
        m.insert("hidden".into(), join(&self.word.hidden));
        m.insert("char_kernel".into(), self.char.kernel.to_string());
        m.insert("char_strides".into(), join(&self.char.strides));
        m.insert("char_pool".into(), self.char.pool.to_string());
        m.insert("char_filters".into(), self.char.filters.to_string());
        m.insert("char_hidden".into(), self.char.hidden.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("max_epochs".into(), self.max_epochs.to_string());
        m.insert("patience".into(), self.patience.to_string());
        m.insert("lr".into(), format!("{:e}", self.adam.lr));
        m.insert("beta1".into(), self.adam.beta1.to_string());
        m.insert("beta2".into(), self.adam.beta2.to_string());
        m.insert("epsilon".into(), format!("{:e}", self.adam.epsilon));
        m.insert("folds".into(), self.folds.to_string());
        m.insert("val_fraction".into(), self.val_fraction.to_string());
        m.insert("search_budget".into(), self.search_budget.to_string());
        for t in &self.tasks {
            let role = match t.role {
                Role::Hate => "hate",
                Role::Sentiment => "sentiment",
            };
            m.insert(format!("task.{}", t.name), format!("{role}:{}", t.path.display()));
            if let Some(test) = &t.test {
                m.insert(format!("task.{}.test", t.name), test.display().to_string());
            }
            if let Some(l) = &t.labels {
                m.insert(format!("task.{}.labels", t.name), l.join(","));
            }
            m.insert(format!("task.{}.weight", t.name), t.weight.to_string());
        }
        m
    }

    /// The config as a document [`RunConfig::parse`] reads back. Paths are
    /// written as held, so relative paths stay relative to the caller.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut tasks = Vec::new();
        for (k, v) in self.echo() {
            if k.starts_with("task.") {
                tasks.push((k, v));
            } else if !v.is_empty() || !matches!(k.as_str(), "lexicon" | "emoticons" | "embeddings" | "subwords") {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        if let Some(o) = &self.output {
            out.push_str(&format!("output = {}\n", o.display()));
        }
        // declarations before their fields, in declaration order
        for t in &self.tasks {
            for (k, v) in tasks.iter().filter(|(k, _)| *k == format!("task.{}", t.name)) {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        for (k, v) in tasks.iter().filter(|(k, _)| k.matches('.').count() > 1) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
