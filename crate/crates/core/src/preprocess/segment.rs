//! Unigram word segmentation for hashtags.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Word frequencies used to score candidate splits. Stored lowercase.
#[derive(Clone, Debug)]
pub struct SegmenterLexicon {
    counts: HashMap<String, u64>,
    total: u64,
    max_word_len: usize,
}

impl Default for SegmenterLexicon {
    fn default() -> Self {
        SegmenterLexicon {
            counts: HashMap::new(),
            total: 0,
            max_word_len: 24,
        }
    }
}

impl SegmenterLexicon {
    pub fn from_counts<'a>(entries: impl IntoIterator<Item = (&'a str, u64)>) -> Result<Self> {
        let mut lex = SegmenterLexicon::default();
        for (word, count) in entries {
            lex.insert(word, count)?;
        }
        Ok(lex)
    }

    fn insert(&mut self, word: &str, count: u64) -> Result<()> {
        if count == 0 {
            return Err(Error::Data(format!("lexicon count for '{word}' must be positive")));
        }
        *self.counts.entry(word.to_lowercase()).or_insert(0) += count;
        self.total += count;
        Ok(())
    }

    pub fn with_max_word_len(mut self, len: usize) -> Self {
        self.max_word_len = len.max(1);
        self
    }

    /// Parses `word<TAB>count` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut lex = SegmenterLexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source_name, i + 1, "expected word<TAB>count"))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::parse(source_name, i + 1, format!("bad count '{count}'")))?;
            if word.is_empty() || count == 0 {
                return Err(Error::parse(source_name, i + 1, "empty word or zero count"));
            }
            lex.insert(word, count)?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.counts.get(&word.to_lowercase()).copied()
    }

    /// `ln P(word)`: relative frequency for known words, otherwise
    /// `10 / (total · 10^len)`.
    pub fn log_prob(&self, word: &str) -> f64 {
        let total = self.total.max(1) as f64;
        match self.counts.get(word) {
            Some(&c) => (c as f64 / total).ln(),
            None => {
                let n = word.chars().count() as f64;
                10f64.ln() - total.ln() - n * 10f64.ln()
            }
        }
    }
}

/// Splits a lowercase string into the word sequence maximising the summed
/// unigram log-probability. Ties go to the split with fewer words.
pub fn segment(text: &str, lexicon: &SegmenterLexicon) -> Vec<String> {
    let text = text.to_lowercase();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    if n == 0 {
        return Vec::new();
    }
    let byte = |k: usize| if k == n { text.len() } else { chars[k].0 };

    // best[j]: (score, words, start of last word) for the prefix of j chars.
    let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; n + 1];
    best[0] = Some((0.0, 0, 0));
    for j in 1..=n {
        let lo = j.saturating_sub(lexicon.max_word_len);
        for i in lo..j {
            let Some((score, words, _)) = best[i] else { continue };
            let cand = score + lexicon.log_prob(&text[byte(i)..byte(j)]);
            let better = match best[j] {
                None => true,
                Some((s, w, _)) => cand > s || (cand == s && words + 1 < w),
            };
            if better {
                best[j] = Some((cand, words + 1, i));
            }
        }
    }

    let mut out = Vec::new();
    let mut j = n;
    while j > 0 {
        let (_, _, i) = best[j].expect("every prefix is reachable");
        out.push(text[byte(i)..byte(j)].to_string());
        j = i;
    }
    out.reverse();
    out
}
