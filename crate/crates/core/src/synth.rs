//! Keyword-separable toy corpora for smoke tests, examples and the demo.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{Dataset, Example};
use crate::error::Result;
use crate::seed::rng_for;

pub const FILLER: [&str; 24] = [
    "the", "a", "today", "people", "again", "this", "that", "really", "just", "news", "city", "about", "what", "some",
    "they", "we", "our", "time", "still", "here", "look", "make", "said", "more",
];

/// One class per keyword list. Every text holds one or two of its class's
/// keywords among `len` filler words, so the label is a function of the
/// keyword set.
#[derive(Clone, Debug)]
pub struct KeywordTask {
    pub labels: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    pub len: (usize, usize),
}

impl KeywordTask {
    pub fn new(classes: &[(&str, &[&str])]) -> Self {
        KeywordTask {
            labels: classes.iter().map(|(l, _)| l.to_string()).collect(),
            keywords: classes
                .iter()
                .map(|(_, k)| k.iter().map(|s| s.to_string()).collect())
                .collect(),
            len: (4, 8),
        }
    }

    /// `n` examples, classes balanced to within one, shuffled.
    pub fn generate(&self, n: usize, seed: u64, id_prefix: &str) -> Dataset {
        let mut rng = rng_for(seed, "synth");
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.labels.len()).collect();
        labels.shuffle(&mut rng);
        let examples = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                let len = rng.gen_range(self.len.0..=self.len.1);
                let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
                let kw = &self.keywords[label];
                for _ in 0..rng.gen_range(1..=2) {
                    let at = rng.gen_range(0..=words.len());
                    words.insert(at, kw.choose(&mut rng).unwrap());
                }
                Example {
                    id: format!("{id_prefix}{i}"),
                    text: words.join(" "),
                    label,
                }
            })
            .collect();
        Dataset {
            labels: self.labels.clone(),
            examples,
            warnings: Vec::new(),
        }
    }
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "text", "label"]).map_err(std::io::Error::from)?;
    for e in &dataset.examples {
        w.write_record([&e.id, &e.text, &dataset.labels[e.label]])
            .map_err(std::io::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
