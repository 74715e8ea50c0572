//! Labeled text files: `id,text,label` with standard CSV quoting.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub labels: Vec<String>,
    pub examples: Vec<Example>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}

/// Reads a dataset. Labels are numbered in first-appearance order unless
/// `label_order` fixes them, in which case unknown labels are rejected.
pub fn parse_dataset<R: Read>(reader: R, source: &str, label_order: Option<&[String]>) -> Result<Dataset> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| Error::parse(source, 1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::parse(source, 1, format!("missing column '{name}'")))
    };
    let (ci, ct, cl) = (column("id")?, column("text")?, column("label")?);
    let mut labels: Vec<String> = label_order.map(<[String]>::to_vec).unwrap_or_default();
    let mut label_index: HashMap<String, usize> = labels.iter().cloned().zip(0..).collect();
    let mut seen_ids: HashMap<String, u64> = HashMap::new();
    let mut examples = Vec::new();
    for record in csv.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(source, line as usize, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line()) as usize;
        let id = record[ci].to_string();
        if let Some(first) = seen_ids.insert(id.clone(), line as u64) {
            return Err(Error::parse(
                source,
                line,
                format!("duplicate id '{id}' (first on line {first})"),
            ));
        }
        let raw = &record[cl];
        let label = match label_index.get(raw) {
            Some(&l) => l,
            None if label_order.is_some() => {
                return Err(Error::parse(
                    source,
                    line,
                    format!("label '{raw}' is not in the configured label list"),
                ));
            }
            None => {
                labels.push(raw.to_string());
                label_index.insert(raw.to_string(), labels.len() - 1);
                labels.len() - 1
            }
        };
        examples.push(Example {
            id,
            text: record[ct].to_string(),
            label,
        });
    }
    let mut warnings = Vec::new();
    let mut folded: HashSet<String> = HashSet::new();
    for (i, l) in labels.iter().enumerate() {
        let key = l.to_lowercase();
        if !folded.insert(key.clone()) {
            let first = labels[..i].iter().find(|m| m.to_lowercase() == key).expect("seen");
            warnings.push(format!("{source}: labels '{first}' and '{l}' differ only in case"));
        }
    }
    Ok(Dataset {
        labels,
        examples,
        warnings,
    })
}

pub fn load_dataset(path: &Path, label_order: Option<&[String]>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_dataset(file, &path.display().to_string(), label_order)
}
