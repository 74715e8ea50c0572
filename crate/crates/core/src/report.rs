//! Experiment reports: a lossless JSON document plus plain-table and CSV
//! renderings, and an audit that re-derives every score.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, percent, ConfusionMatrix, Scores};

pub const REPORT_FORMAT: &str = "mtltext-report/1";

/// Fold-mean and pooled scores further apart than this (in percentage
/// points) are flagged.
pub const AGGREGATION_TOLERANCE_PP: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub confusion: ConfusionMatrix,
    pub scores: Scores,
    pub zero_division: Vec<String>,
}

impl EvalRecord {
    pub fn new(confusion: ConfusionMatrix) -> Result<Self> {
        let m = compute_metrics(&confusion)?;
        Ok(EvalRecord {
            scores: Scores::from(&m),
            zero_division: m.zero_division,
            confusion,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    #[serde(flatten)]
    pub eval: EvalRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub labels: Vec<String>,
    pub folds: Vec<FoldRecord>,
    pub mean: Scores,
    pub pooled: EvalRecord,
    pub aggregation_gap_pp: f64,
    pub aggregation_flagged: bool,
    pub test: Option<EvalRecord>,
}

impl TaskReport {
    pub fn from_folds(
        task: &str,
        labels: &[String],
        folds: Vec<ConfusionMatrix>,
        test: Option<ConfusionMatrix>,
    ) -> Result<Self> {
        let mut pooled = ConfusionMatrix::new(labels.to_vec());
        let mut records = Vec::with_capacity(folds.len());
        for (f, cm) in folds.into_iter().enumerate() {
            pooled.merge(&cm)?;
            records.push(FoldRecord {
                fold: f + 1,
                eval: EvalRecord::new(cm)?,
            });
        }
        let mean = Scores::mean(&records.iter().map(|r| r.eval.scores).collect::<Vec<_>>());
        let pooled = EvalRecord::new(pooled)?;
        let gap = mean.max_gap_pp(&pooled.scores);
        Ok(TaskReport {
            task: task.to_string(),
            labels: labels.to_vec(),
            folds: records,
            mean,
            aggregation_gap_pp: gap,
            aggregation_flagged: gap > AGGREGATION_TOLERANCE_PP,
            pooled,
            test: test.map(EvalRecord::new).transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: String,
    pub variant: u8,
    pub seed: u64,
    pub folds: usize,
    pub config: BTreeMap<String, String>,
    pub tasks: Vec<TaskReport>,
    pub events: Vec<String>,
}

impl Report {
    pub fn new(variant: u8, seed: u64, folds: usize, config: BTreeMap<String, String>) -> Self {
        Report {
            format: REPORT_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            variant,
            seed,
            folds,
            config,
            tasks: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text).map_err(|e| Error::Data(format!("report: {e}")))?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Data(format!("unsupported report format '{}'", r.format)));
        }
        Ok(r)
    }

    /// Fold-average layout: macro-F, weighted-F and accuracy at two decimals,
    /// then the pooled (and test) confusion grids.
    pub fn to_plain(&self) -> String {
        let mut s = format!(
            "variant {}  seed {}  {} folds  (mtltext {})\n",
            self.variant, self.seed, self.folds, self.version
        );
        for t in &self.tasks {
            s.push_str(&format!("\n{}\n", t.task));
            s.push_str(&format!(
                "{:<8} {:>9} {:>12} {:>8}\n",
                "", "Macro(%)", "Weighted(%)", "Acc.(%)"
            ));
            let row = |name: &str, sc: &Scores| {
                format!(
                    "{name:<8} {:>9} {:>12} {:>8}\n",
                    percent(sc.macro_f1),
                    percent(sc.weighted_f1),
                    percent(sc.accuracy)
                )
            };
            for f in &t.folds {
                s.push_str(&row(&format!("fold {}", f.fold), &f.eval.scores));
            }
            s.push_str(&row("mean", &t.mean));
            s.push_str(&row("pooled", &t.pooled.scores));
            if let Some(test) = &t.test {
                s.push_str(&row("test", &test.scores));
            }
            if t.aggregation_flagged {
                s.push_str(&format!(
                    "note: fold-mean and pooled scores differ by {:.2} points\n",
                    t.aggregation_gap_pp
                ));
            }
            s.push_str("\npooled confusion (rows true, columns predicted)\n");
            s.push_str(&t.pooled.confusion.render());
            if let Some(test) = &t.test {
                s.push_str("\ntest confusion (rows true, columns predicted)\n");
                s.push_str(&test.confusion.render());
            }
        }
        if !self.events.is_empty() {
            s.push_str("\nevents\n");
            for e in &self.events {
                s.push_str(&format!("- {e}\n"));
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "row", "macro_f1", "weighted_f1", "accuracy"])
            .expect("in-memory write");
        for t in &self.tasks {
            let mut put = |row: String, sc: &Scores| {
                w.write_record([
                    t.task.clone(),
                    row,
                    percent(sc.macro_f1),
                    percent(sc.weighted_f1),
                    percent(sc.accuracy),
                ])
                .expect("in-memory write");
            };
            for f in &t.folds {
                put(format!("fold{}", f.fold), &f.eval.scores);
            }
            put("mean".into(), &t.mean);
            put("pooled".into(), &t.pooled.scores);
            if let Some(test) = &t.test {
                put("test".into(), &test.scores);
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Writes `report.json`, `report.txt` and `report.csv` into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.json"), self.to_json())?;
        std::fs::write(dir.join("report.txt"), self.to_plain())?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        Ok(())
    }
}

fn check_eval(what: &str, e: &EvalRecord, problems: &mut Vec<String>) {
    match EvalRecord::new(e.confusion.clone()) {
        Ok(fresh) if fresh.scores == e.scores => {}
        Ok(fresh) => problems.push(format!("{what}: stored {:?}, recomputed {:?}", e.scores, fresh.scores)),
        Err(err) => problems.push(format!("{what}: {err}")),
    }
}

/// Re-derives every score from the stored confusion matrices and fold
/// records. Returns the list of disagreements (empty when consistent).
pub fn audit(report: &Report) -> Vec<String> {
    let mut problems = Vec::new();
    for t in &report.tasks {
        let mut pooled = ConfusionMatrix::new(t.labels.clone());
        for f in &t.folds {
            check_eval(&format!("{} fold {}", t.task, f.fold), &f.eval, &mut problems);
            if let Err(e) = pooled.merge(&f.eval.confusion) {
                problems.push(format!("{} fold {}: {e}", t.task, f.fold));
            }
        }
        if t.folds.len() != report.folds {
            problems.push(format!(
                "{}: {} fold records for k = {}",
                t.task,
                t.folds.len(),
                report.folds
            ));
        }
        if pooled != t.pooled.confusion {
            problems.push(format!("{}: pooled matrix is not the sum of the folds", t.task));
        }
        check_eval(&format!("{} pooled", t.task), &t.pooled, &mut problems);
        let mean = Scores::mean(&t.folds.iter().map(|f| f.eval.scores).collect::<Vec<_>>());
        if mean != t.mean {
            problems.push(format!("{}: stored mean {:?}, recomputed {:?}", t.task, t.mean, mean));
        }
        let gap = mean.max_gap_pp(&t.pooled.scores);
        if gap != t.aggregation_gap_pp || (gap > AGGREGATION_TOLERANCE_PP) != t.aggregation_flagged {
            problems.push(format!(
                "{}: aggregation flag does not match a gap of {gap} points",
                t.task
            ));
        }
        if let Some(test) = &t.test {
            check_eval(&format!("{} test", t.task), test, &mut problems);
        }
    }
    problems
}

/// Scores as printed in a results table, in percent; absent columns are
/// `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PublishedScores {
    pub macro_f1: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyFinding {
    pub recomputed: Scores,
    /// Largest difference over the published columns, in points.
    pub gap_pp: f64,
    pub flagged: bool,
}

/// Compares published scores with those implied by a published confusion
/// matrix. Differences within `tolerance_pp` are rounding.
pub fn check_published(
    published: &PublishedScores,
    counts: &ConfusionMatrix,
    tolerance_pp: f64,
) -> Result<ConsistencyFinding> {
    let recomputed = Scores::from(&compute_metrics(counts)?);
    let pairs = [
        (published.macro_f1, recomputed.macro_f1),
        (published.weighted_f1, recomputed.weighted_f1),
        (published.accuracy, recomputed.accuracy),
    ];
    let gap_pp = pairs
        .iter()
        .filter_map(|&(p, r)| p.map(|p| (p - 100.0 * r).abs()))
        .fold(0.0, f64::max);
    Ok(ConsistencyFinding {
        recomputed,
        gap_pp,
        flagged: gap_pp > tolerance_pp,
    })
}
