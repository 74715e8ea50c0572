//! Tweet cleaning: URL/number stripping, emoticon categories, hashtag
//! segmentation and mention normalisation.
//!
//! [`preprocess`] applies the steps in this order: URLs and digits are
//! stripped, emoticons mapped, hashtags segmented, mentions replaced by
//! `user`, the punctuation set `@ ! ; : ? .` removed, and the rest split on
//! whitespace and lowercased. Tokens without any letter are dropped.

mod emoticon;
mod segment;

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use emoticon::{is_emoji, EmoticonCategory, EmoticonStats, EmoticonTable, Piece};
pub use segment::{segment, SegmenterLexicon};

/// Characters removed by the light cleaning step.
pub const STRIPPED: [char; 6] = ['@', '!', ';', ':', '?', '.'];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Plain,
    FromHashtag,
    EmoticonCategory,
    MentionPlaceholder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CleanedText {
    pub tokens: Vec<Token>,
    pub emoticons: EmoticonStats,
}

impl CleanedText {
    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Space-joined tokens.
    pub fn render(&self) -> String {
        self.words().join(" ")
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:\b[a-z][a-z0-9+.\-]*://|\bwww\.)\S*").unwrap())
}

/// Removes URLs (scheme-prefixed or `www.`-prefixed runs) and ASCII digits.
pub fn strip_urls_and_digits(text: &str) -> String {
    url_re()
        .replace_all(text, " ")
        .chars()
        .filter(|c| !c.is_ascii_digit())
        .collect()
}

fn is_handle_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn is_hashtag_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '*'
}

#[derive(Debug, PartialEq, Eq)]
enum Span<'a> {
    Text(&'a str),
    Hashtag(&'a str),
    Mention(&'a str),
}

/// Splits text into plain runs, `#tag` bodies and `@handle` mentions. A mention
/// `@` must not follow a word character.
fn spans(text: &str) -> Vec<Span<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev: Option<char> = None;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let next = iter.peek().map(|&(_, n)| n);
        let marker = match c {
            '#' if next.is_some_and(is_hashtag_char) => Some(true),
            '@' if next.is_some_and(is_handle_char) && !prev.is_some_and(char::is_alphanumeric) => Some(false),
            _ => None,
        };
        if let Some(is_tag) = marker {
            if start < i {
                out.push(Span::Text(&text[start..i]));
            }
            let body_start = i + 1;
            let mut end = body_start;
            while let Some(&(j, n)) = iter.peek() {
                let keep = if is_tag { is_hashtag_char(n) } else { is_handle_char(n) };
                if !keep {
                    break;
                }
                end = j + n.len_utf8();
                prev = Some(n);
                iter.next();
            }
            let body = &text[body_start..end];
            out.push(if is_tag {
                Span::Hashtag(body)
            } else {
                Span::Mention(body)
            });
            start = end;
            continue;
        }
        prev = Some(c);
    }
    if start < text.len() {
        out.push(Span::Text(&text[start..]));
    }
    out
}

fn has_letter(s: &str) -> bool {
    s.chars().any(char::is_alphabetic)
}

/// Replaces the stripped punctuation and stray `#`/`@` with spaces and returns
/// the lowercase words that contain at least one letter.
fn plain_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| c.is_whitespace() || STRIPPED.contains(&c) || c == '#')
        .filter(|w| has_letter(w))
        .map(str::to_lowercase)
}

/// The light cleaning step on its own: URLs, digits and the punctuation set
/// are removed, except the `@` of a mention and the `#` of a hashtag, which
/// later steps consume. Whitespace is collapsed and the result lowercased.
pub fn clean_text(raw: &str) -> String {
    let stripped = strip_urls_and_digits(raw);
    let mut words: Vec<String> = Vec::new();
    for span in spans(&stripped) {
        match span {
            Span::Text(t) => words.extend(plain_words(t)),
            Span::Hashtag(body) => words.push(format!("#{}", body.to_lowercase())),
            Span::Mention(handle) => words.push(format!("@{}", handle.to_lowercase())),
        }
    }
    words.join(" ")
}

/// Replaces every `@handle` with the token `user`.
pub fn normalize_mentions(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for span in spans(text) {
        match span {
            Span::Text(t) => out.push_str(t),
            Span::Hashtag(body) => {
                out.push('#');
                out.push_str(body);
            }
            Span::Mention(_) => out.push_str("user"),
        }
    }
    out
}

/// Segments a hashtag body (without `#`). Underscores are treated as explicit
/// word breaks.
pub fn segment_hashtag(tag: &str, lexicon: &SegmenterLexicon) -> Vec<String> {
    tag.trim_start_matches('#')
        .split('_')
        .flat_map(|part| segment(part, lexicon))
        .collect()
}

/// Loaded resources for [`preprocess`].
#[derive(Clone, Debug, Default)]
pub struct Preprocessor {
    pub lexicon: SegmenterLexicon,
    pub emoticons: EmoticonTable,
}

impl Preprocessor {
    pub fn new(lexicon: SegmenterLexicon, emoticons: EmoticonTable) -> Self {
        Preprocessor { lexicon, emoticons }
    }

    pub fn run(&self, raw: &str) -> CleanedText {
        preprocess(raw, &self.lexicon, &self.emoticons)
    }
}

pub fn preprocess(raw: &str, lexicon: &SegmenterLexicon, table: &EmoticonTable) -> CleanedText {
    let stripped = strip_urls_and_digits(raw);
    let (pieces, emoticons) = table.split(&stripped);
    let mut tokens = Vec::new();
    let mut push = |text: String, provenance| {
        if has_letter(&text) {
            tokens.push(Token { text, provenance });
        }
    };
    for piece in pieces {
        match piece {
            Piece::Category(c) => push(c.token().to_string(), Provenance::EmoticonCategory),
            Piece::Text(text) => {
                for span in spans(&text) {
                    match span {
                        Span::Text(t) => plain_words(t).for_each(|w| push(w, Provenance::Plain)),
                        Span::Hashtag(body) => segment_hashtag(body, lexicon)
                            .into_iter()
                            .for_each(|w| push(w, Provenance::FromHashtag)),
                        Span::Mention(_) => push("user".to_string(), Provenance::MentionPlaceholder),
                    }
                }
            }
        }
    }
    CleanedText { tokens, emoticons }
}
