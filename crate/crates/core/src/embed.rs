//! Vocabularies, word and subword vector tables, and example encoding.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Feed, Graph};
use crate::preprocess::CleanedText;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<oov>";

/// Width of the character one-hot alphabet: `a`..`z` plus one slot for
/// everything else.
pub const CHAR_ALPHABET: usize = 27;

/// Token to row mapping. Row 0 is always padding; an OOV row is optional.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    oov: Option<usize>,
}

impl Vocab {
    /// Padding at 0 and a shared OOV row at 1.
    pub fn with_oov() -> Self {
        let mut v = Vocab::padding_only();
        v.oov = Some(v.push(OOV_TOKEN));
        v
    }

    pub fn padding_only() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            oov: None,
        };
        v.push(PAD_TOKEN);
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Adds `token` if new and returns its row.
    pub fn add(&mut self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&id) => id,
            None => self.push(token),
        }
    }

    /// Vocabulary over documents in first-appearance order, with an OOV row.
    pub fn build<'a, I, D>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a str>,
    {
        let mut v = Vocab::with_oov();
        for doc in docs {
            for tok in doc {
                v.add(tok);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn oov_id(&self) -> Option<usize> {
        self.oov
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Row for `token`: its own, else the OOV row, else padding.
    pub fn lookup(&self, token: &str) -> usize {
        self.id(token).or(self.oov).unwrap_or(PAD_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in row order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(PAD_TOKEN) {
            return Err(Error::Data("vocabulary must start with the padding token".into()));
        }
        let mut v = Vocab::padding_only();
        for line in lines {
            if line == OOV_TOKEN && v.oov.is_none() {
                v.oov = Some(v.push(OOV_TOKEN));
            } else {
                v.push(line);
            }
        }
        Ok(v)
    }

    /// Rebuilds the lookup index after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

/// Pretrained word vectors with a zero padding row at index 0.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub matrix: Tensor,
    pub is_static: bool,
    /// Tokens that appeared more than once in the source file (first kept).
    pub duplicates: Vec<String>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, token: &str) -> Option<&[f64]> {
        self.vocab.id(token).map(|id| self.matrix.row(id))
    }

    /// Parses the text format: a `<count> <dim>` header, then `token v1 … vd`
    /// lines.
    pub fn parse(text: &str, source_name: &str, expected_dim: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines
            .next()
            .ok_or_else(|| Error::parse(source_name, 1, "missing '<count> <dim>' header"))?;
        let mut parts = header.split_whitespace();
        let (count, dim) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(d), None) => (
                c.parse::<usize>()
                    .map_err(|_| Error::parse(source_name, hl + 1, "bad word count"))?,
                d.parse::<usize>()
                    .map_err(|_| Error::parse(source_name, hl + 1, "bad dimension"))?,
            ),
            _ => return Err(Error::parse(source_name, hl + 1, "header must be '<count> <dim>'")),
        };
        if let Some(e) = expected_dim {
            if e != dim {
                return Err(Error::parse(
                    source_name,
                    hl + 1,
                    format!("dimension {dim} does not match expected {e}"),
                ));
            }
        }
        let mut vocab = Vocab::padding_only();
        let mut values = vec![0.0; dim];
        let mut duplicates = Vec::new();
        let mut seen = 0usize;
        for (i, line) in lines {
            seen += 1;
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-empty line");
            let row: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(source_name, i + 1, "non-numeric vector component"))?;
            if row.len() != dim {
                return Err(Error::parse(
                    source_name,
                    i + 1,
                    format!("expected {dim} components, found {}", row.len()),
                ));
            }
            if vocab.id(token).is_some() {
                duplicates.push(token.to_string());
                continue;
            }
            vocab.add(token);
            values.extend(row);
        }
        if seen != count {
            return Err(Error::parse(
                source_name,
                hl + 1,
                format!("header declares {count} words but the file has {seen}"),
            ));
        }
        let matrix = Tensor::new(vec![vocab.len(), dim], values)?;
        Ok(EmbeddingTable {
            vocab,
            matrix,
            is_static: true,
            duplicates,
        })
    }

    pub fn load(path: &Path, expected_dim: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string(), expected_dim)
    }
}

pub fn load_embedding_table(path: &Path, expected_dim: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::load(path, Some(expected_dim))
}

/// Character n-grams of `<word>` for every n in `[n_min, n_max]`, in order of
/// n then position.
pub fn char_ngrams(word: &str, n_min: usize, n_max: usize) -> Vec<String> {
    let wrapped: Vec<char> = format!("<{word}>").chars().collect();
    let mut out = Vec::new();
    for n in n_min..=n_max.min(wrapped.len()) {
        for start in 0..=wrapped.len() - n {
            out.push(wrapped[start..start + n].iter().collect());
        }
    }
    out
}

fn fnv1a32(s: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in s.bytes() {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Bag-of-character-n-gram word vectors. N-grams found in a loaded table use
/// their own row; every other n-gram hashes into one of `buckets` rows.
#[derive(Clone, Debug)]
pub struct SubwordModel {
    pub n_min: usize,
    pub n_max: usize,
    known: HashMap<String, usize>,
    buckets: usize,
    pub table: Tensor,
}

impl SubwordModel {
    pub fn random(dim: usize, buckets: usize, seed: u64) -> Self {
        let buckets = buckets.max(1);
        let mut rng = rng_for(seed, "subword-table");
        let values = (0..buckets * dim).map(|_| rng.gen_range(-0.25..0.25)).collect();
        SubwordModel {
            n_min: 3,
            n_max: 6,
            known: HashMap::new(),
            buckets,
            table: Tensor::new(vec![buckets, dim], values).expect("sized above"),
        }
    }

    /// Uses the rows of a loaded n-gram table (padding row dropped), plus
    /// `buckets` zero rows for n-grams the table lacks.
    pub fn from_table(loaded: &EmbeddingTable, buckets: usize) -> Self {
        let dim = loaded.dim();
        let buckets = buckets.max(1);
        let mut known = HashMap::new();
        let mut values = Vec::with_capacity((loaded.vocab.len() - 1 + buckets) * dim);
        for id in 1..loaded.vocab.len() {
            known.insert(loaded.vocab.token(id).to_string(), id - 1);
            values.extend_from_slice(loaded.matrix.row(id));
        }
        values.resize(values.len() + buckets * dim, 0.0);
        let rows = values.len() / dim;
        SubwordModel {
            n_min: 3,
            n_max: 6,
            known,
            buckets,
            table: Tensor::new(vec![rows, dim], values).expect("sized above"),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn row_of(&self, ngram: &str) -> usize {
        match self.known.get(ngram) {
            Some(&r) => r,
            None => self.known.len() + fnv1a32(ngram) as usize % self.buckets,
        }
    }

    /// Table rows for every n-gram of `word`; empty for the empty word.
    pub fn rows(&self, word: &str) -> Vec<usize> {
        if word.is_empty() {
            return Vec::new();
        }
        char_ngrams(word, self.n_min, self.n_max)
            .iter()
            .map(|g| self.row_of(g))
            .collect()
    }

    /// Mean of the n-gram vectors of `word`.
    pub fn char_ngram_vector(&self, word: &str) -> Vec<f64> {
        mean_rows(&self.table, &self.rows(word))
    }
}

fn mean_rows(table: &Tensor, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; table.cols()];
    if rows.is_empty() {
        return out;
    }
    for &r in rows {
        for (o, x) in out.iter_mut().zip(table.row(r)) {
            *o += x;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

pub fn char_ngram_vector(word: &str, model: &SubwordModel) -> Vec<f64> {
    model.char_ngram_vector(word)
}

/// `w_e ⊕ c_e`: the pretrained row (zeros when out of vocabulary or when no
/// table is given) followed by the subword vector.
pub fn compose_word_vector(
    word: &str,
    word_table: Option<&EmbeddingTable>,
    word_dim: usize,
    subword: &SubwordModel,
) -> Vec<f64> {
    let mut out = match word_table.and_then(|t| t.row(word)) {
        Some(row) => row.to_vec(),
        None => vec![0.0; word_dim],
    };
    out.extend(subword.char_ngram_vector(word));
    out
}

/// Random static input vectors, one row per vocabulary entry, padding zeroed.
pub fn random_input_matrix(vocab: &Vocab, dim: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "random-word-vectors");
    let mut values: Vec<f64> = (0..vocab.len() * dim).map(|_| rng.gen_range(-0.25..0.25)).collect();
    values[..dim].iter_mut().for_each(|v| *v = 0.0);
    Tensor::new(vec![vocab.len(), dim], values).expect("sized above")
}

/// Composed input vectors for every vocabulary entry. Padding and the shared
/// OOV row are all-zero.
pub fn composed_input_matrix(
    vocab: &Vocab,
    word_table: Option<&EmbeddingTable>,
    word_dim: usize,
    subword: &SubwordModel,
) -> Tensor {
    let dim = word_dim + subword.dim();
    let mut values = Vec::with_capacity(vocab.len() * dim);
    for id in 0..vocab.len() {
        if id == PAD_ID || Some(id) == vocab.oov_id() {
            values.extend(std::iter::repeat_n(0.0, dim));
        } else {
            values.extend(compose_word_vector(vocab.token(id), word_table, word_dim, subword));
        }
    }
    Tensor::new(vec![vocab.len(), dim], values).expect("sized above")
}

/// Pretrained word half only (zeros for unknown words, padding and OOV).
pub fn word_input_matrix(vocab: &Vocab, word_table: Option<&EmbeddingTable>, word_dim: usize) -> Tensor {
    let mut values = Vec::with_capacity(vocab.len() * word_dim);
    for id in 0..vocab.len() {
        match word_table.and_then(|t| t.row(vocab.token(id))) {
            Some(row) if id != PAD_ID && Some(id) != vocab.oov_id() => values.extend_from_slice(row),
            _ => values.extend(std::iter::repeat_n(0.0, word_dim)),
        }
    }
    Tensor::new(vec![vocab.len(), word_dim], values).expect("sized above")
}

/// Subword row lists per vocabulary entry, for the trainable bag embedding.
pub fn subword_bags(vocab: &Vocab, subword: &SubwordModel) -> Vec<Vec<usize>> {
    (0..vocab.len())
        .map(|id| {
            if id == PAD_ID || Some(id) == vocab.oov_id() {
                Vec::new()
            } else {
                subword.rows(vocab.token(id))
            }
        })
        .collect()
}

/// Token ids truncated or right-padded with 0 to `len`.
pub fn encode_sequence<S: AsRef<str>>(tokens: &[S], vocab: &Vocab, len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokens.iter().take(len).map(|t| vocab.lookup(t.as_ref())).collect();
    ids.resize(len, PAD_ID);
    ids
}

/// Alphabet slot of a character: `a`..`z` are 0..25, everything else 26.
pub fn char_slot(c: char) -> u8 {
    if c.is_ascii_lowercase() {
        c as u8 - b'a'
    } else {
        26
    }
}

/// Character slots of the first `len` characters.
pub fn char_slots(text: &str, len: usize) -> Vec<u8> {
    text.chars().take(len).map(char_slot).collect()
}

/// `[len × 27]` one-hot rows; rows past the text are zero.
pub fn char_one_hot_encode(text: &str, len: usize) -> Tensor {
    one_hot_from_slots(&char_slots(text, len), len)
}

fn one_hot_from_slots(slots: &[u8], len: usize) -> Tensor {
    let mut values = vec![0.0; len * CHAR_ALPHABET];
    for (i, &s) in slots.iter().enumerate() {
        values[i * CHAR_ALPHABET + s as usize] = 1.0;
    }
    Tensor::new(vec![len, CHAR_ALPHABET], values).expect("sized above")
}

/// 95th percentile (nearest rank) of token counts, clamped to `[1, 100]`.
pub fn default_seq_len(lengths: &[usize]) -> usize {
    if lengths.is_empty() {
        return 1;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = (0.95 * sorted.len() as f64).ceil() as usize;
    sorted[rank.max(1) - 1].clamp(1, 100)
}

/// A labeled example in model-ready form. Characters are kept as alphabet
/// slots and expanded to one-hot rows when fed.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub chars: Vec<u8>,
    pub char_len: usize,
    pub label: usize,
    pub task: usize,
}

impl EncodedExample {
    pub fn token_tensor(&self) -> Tensor {
        Tensor::vector(self.tokens.iter().map(|&i| i as f64).collect())
    }

    pub fn char_tensor(&self) -> Tensor {
        one_hot_from_slots(&self.chars, self.char_len)
    }

    /// Inputs required by `graph`.
    pub fn feed(&self, graph: &Graph) -> Feed {
        let mut feed = Feed::new();
        if graph.needs_input("tokens") {
            feed.insert("tokens", self.token_tensor());
        }
        if graph.needs_input("chars") {
            feed.insert("chars", self.char_tensor());
        }
        feed
    }
}

/// Fixed-length encoder for one run.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub vocab: Vocab,
    pub seq_len: usize,
    pub char_len: usize,
}

impl Encoder {
    pub fn encode(&self, text: &CleanedText, label: usize, task: usize) -> EncodedExample {
        let words = text.words();
        EncodedExample {
            tokens: encode_sequence(&words, &self.vocab, self.seq_len),
            chars: char_slots(&text.render(), self.char_len),
            char_len: self.char_len,
            label,
            task,
        }
    }
}
