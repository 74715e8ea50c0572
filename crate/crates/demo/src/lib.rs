//! Browser bindings for three mtltext operations. Each takes plain text and
//! returns a JSON string.

use mtltext::metrics::{compute_metrics, ConfusionMatrix};
use mtltext::preprocess::{preprocess, segment_hashtag, EmoticonTable, SegmenterLexicon, Token};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Cleaned {
    tokens: Vec<Token>,
    rendered: String,
    emoticons_substituted: usize,
    emoticons_dropped: usize,
}

#[derive(Serialize)]
struct Word {
    word: String,
    log_prob: f64,
    known: bool,
}

#[derive(Serialize)]
struct Segmentation {
    words: Vec<Word>,
    score: f64,
}

#[derive(Serialize)]
struct ClassRow {
    label: String,
    precision: f64,
    recall: f64,
    f1: f64,
    support: u64,
}

#[derive(Serialize)]
struct Metrics {
    accuracy: f64,
    macro_f1: f64,
    weighted_f1: f64,
    classes: Vec<ClassRow>,
    zero_division: Vec<String>,
    grid: String,
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn lexicon(text: &str) -> Result<SegmenterLexicon, String> {
    SegmenterLexicon::parse(text, "lexicon").map_err(|e| e.to_string())
}

pub fn preprocess_json(text: &str, lexicon_tsv: &str, emoticons_tsv: &str) -> Result<String, String> {
    let lex = lexicon(lexicon_tsv)?;
    let table = EmoticonTable::parse(emoticons_tsv, "emoticons").map_err(|e| e.to_string())?;
    let out = preprocess(text, &lex, &table);
    json(&Cleaned {
        rendered: out.render(),
        emoticons_substituted: out.emoticons.substituted,
        emoticons_dropped: out.emoticons.dropped,
        tokens: out.tokens,
    })
}

pub fn segment_json(tag: &str, lexicon_tsv: &str) -> Result<String, String> {
    let lex = lexicon(lexicon_tsv)?;
    let words: Vec<Word> = segment_hashtag(tag, &lex)
        .into_iter()
        .map(|w| Word {
            log_prob: lex.log_prob(&w),
            known: lex.count(&w).is_some(),
            word: w,
        })
        .collect();
    let score = words.iter().map(|w| w.log_prob).sum();
    json(&Segmentation { words, score })
}

/// `grid` holds one row per true class, columns in the same class order;
/// numbers may be separated by spaces, tabs or commas.
pub fn metrics_json(labels: &str, grid: &str) -> Result<String, String> {
    let labels: Vec<String> = labels
        .split(',')
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let counts = grid
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<u64>()
                        .map_err(|_| format!("row {}: '{s}' is not a count", i + 1))
                })
                .collect::<Result<Vec<u64>, String>>()
        })
        .collect::<Result<Vec<_>, String>>()?;
    let cm = ConfusionMatrix::from_counts(labels, counts).map_err(|e| e.to_string())?;
    let m = compute_metrics(&cm).map_err(|e| e.to_string())?;
    json(&Metrics {
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
        weighted_f1: m.weighted_f1,
        classes: m
            .per_class
            .into_iter()
            .map(|c| ClassRow {
                label: c.label,
                precision: c.precision,
                recall: c.recall,
                f1: c.f1,
                support: c.support,
            })
            .collect(),
        zero_division: m.zero_division,
        grid: cm.render(),
    })
}

#[wasm_bindgen]
pub fn clean(text: &str, lexicon_tsv: &str, emoticons_tsv: &str) -> Result<String, JsError> {
    preprocess_json(text, lexicon_tsv, emoticons_tsv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn segment(tag: &str, lexicon_tsv: &str) -> Result<String, JsError> {
    segment_json(tag, lexicon_tsv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn metrics(labels: &str, grid: &str) -> Result<String, JsError> {
    metrics_json(labels, grid).map_err(|e| JsError::new(&e))
}
