//! Confusion matrices and the derived scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let c = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != labels.len() || counts.iter().any(|r| r.len() != labels.len()) {
            return Err(Error::Data(format!(
                "confusion matrix must be {0}x{0} for {0} labels",
                labels.len()
            )));
        }
        Ok(ConfusionMatrix { labels, counts })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.labels != self.labels {
            return Err(Error::Data(
                "cannot merge confusion matrices over different labels".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    /// Labeled integer grid, rows true and columns predicted.
    pub fn render(&self) -> String {
        let width = self
            .labels
            .iter()
            .map(|l| l.chars().count())
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(9);
        let mut s = format!("{:>width$}", "true\\pred");
        for l in &self.labels {
            s.push_str(&format!(" {l:>width$}"));
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(&format!("{l:>width$}"));
            for c in row {
                s.push_str(&format!(" {c:>width$}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Scores are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Quantities that fell back to 0 for a zero denominator, as
    /// `"<label>:<precision|recall|f1>"`.
    pub zero_division: Vec<String>,
}

fn ratio(num: u64, den: u64, label: &str, what: &str, events: &mut Vec<String>) -> f64 {
    if den == 0 {
        events.push(format!("{label}:{what}"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if cm.classes() == 0 || total == 0 {
        return Err(Error::Data("cannot score an empty confusion matrix".into()));
    }
    let mut events = Vec::new();
    let mut per_class = Vec::with_capacity(cm.classes());
    for (c, label) in cm.labels.iter().enumerate() {
        let tp = cm.counts[c][c];
        let precision = ratio(tp, cm.predicted(c), label, "precision", &mut events);
        let recall = ratio(tp, cm.support(c), label, "recall", &mut events);
        let f1 = if precision + recall == 0.0 {
            events.push(format!("{label}:f1"));
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            label: label.clone(),
            precision,
            recall,
            f1,
            support: cm.support(c),
        });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len() as f64;
    let weighted_f1 = per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / total as f64;
    Ok(MetricsReport {
        accuracy: cm.trace() as f64 / total as f64,
        macro_f1,
        weighted_f1,
        per_class,
        zero_division: events,
    })
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Headline scores in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

impl From<&MetricsReport> for Scores {
    fn from(r: &MetricsReport) -> Self {
        Scores {
            macro_f1: r.macro_f1,
            weighted_f1: r.weighted_f1,
            accuracy: r.accuracy,
        }
    }
}

impl Scores {
    pub fn mean(all: &[Scores]) -> Scores {
        let n = all.len().max(1) as f64;
        Scores {
            macro_f1: all.iter().map(|s| s.macro_f1).sum::<f64>() / n,
            weighted_f1: all.iter().map(|s| s.weighted_f1).sum::<f64>() / n,
            accuracy: all.iter().map(|s| s.accuracy).sum::<f64>() / n,
        }
    }

    /// Largest absolute difference in percentage points.
    pub fn max_gap_pp(&self, other: &Scores) -> f64 {
        100.0
            * (self.macro_f1 - other.macro_f1)
                .abs()
                .max((self.weighted_f1 - other.weighted_f1).abs())
                .max((self.accuracy - other.accuracy).abs())
    }
}

/// Percentage at two decimals: 0.55246 → "55.25".
pub fn percent(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}
