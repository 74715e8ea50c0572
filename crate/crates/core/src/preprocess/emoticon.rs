//! Emoticon glyph to sentiment-category substitution.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmoticonCategory {
    Love,
    Sad,
    Happy,
    Shocking,
    Anger,
}

impl EmoticonCategory {
    pub const ALL: [EmoticonCategory; 5] = [
        EmoticonCategory::Love,
        EmoticonCategory::Sad,
        EmoticonCategory::Happy,
        EmoticonCategory::Shocking,
        EmoticonCategory::Anger,
    ];

    pub fn token(self) -> &'static str {
        match self {
            EmoticonCategory::Love => "love",
            EmoticonCategory::Sad => "sad",
            EmoticonCategory::Happy => "happy",
            EmoticonCategory::Shocking => "shocking",
            EmoticonCategory::Anger => "anger",
        }
    }
}

impl fmt::Display for EmoticonCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for EmoticonCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        EmoticonCategory::ALL
            .into_iter()
            .find(|c| c.token() == s.trim().to_lowercase())
            .ok_or_else(|| format!("unknown emoticon category '{s}' (expected love, sad, happy, shocking or anger)"))
    }
}

#[derive(Clone, Debug, Default)]
pub struct EmoticonTable {
    entries: HashMap<String, EmoticonCategory>,
    longest: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmoticonStats {
    pub substituted: usize,
    pub dropped: usize,
}

impl EmoticonStats {
    pub fn merge(&mut self, other: EmoticonStats) {
        self.substituted += other.substituted;
        self.dropped += other.dropped;
    }
}

/// A piece of text after emoticon mapping: either untouched text or a
/// category token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Text(String),
    Category(EmoticonCategory),
}

impl EmoticonTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, glyph: impl Into<String>, category: EmoticonCategory) {
        let glyph = glyph.into();
        self.longest = self.longest.max(glyph.chars().count());
        self.entries.insert(glyph, category);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, glyph: &str) -> Option<EmoticonCategory> {
        self.entries.get(glyph).copied()
    }

    /// Parses `U+XXXX<TAB>category` or `glyph<TAB>category` lines. `U+` keys may
    /// list several code points separated by spaces or `+`.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut table = EmoticonTable::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, cat) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(source_name, i + 1, "expected glyph<TAB>category"))?;
            let category: EmoticonCategory = cat.parse().map_err(|m: String| Error::parse(source_name, i + 1, m))?;
            let glyph = if key.starts_with("U+") || key.starts_with("u+") {
                decode_code_points(key).map_err(|m| Error::parse(source_name, i + 1, m))?
            } else {
                key.to_string()
            };
            if glyph.is_empty() {
                return Err(Error::parse(source_name, i + 1, "empty glyph"));
            }
            table.insert(glyph, category);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Replaces table glyphs with category pieces (longest match first) and
    /// removes any other emoji.
    pub fn split(&self, text: &str) -> (Vec<Piece>, EmoticonStats) {
        let chars: Vec<char> = text.chars().collect();
        let mut pieces = Vec::new();
        let mut buf = String::new();
        let mut stats = EmoticonStats::default();
        let mut i = 0;
        'outer: while i < chars.len() {
            let max = self.longest.min(chars.len() - i);
            for len in (1..=max).rev() {
                let cand: String = chars[i..i + len].iter().collect();
                if let Some(cat) = self.entries.get(&cand) {
                    if !buf.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut buf)));
                    }
                    pieces.push(Piece::Category(*cat));
                    stats.substituted += 1;
                    i += len;
                    // A trailing presentation selector belongs to the glyph.
                    while i < chars.len() && is_emoji_modifier(chars[i]) {
                        i += 1;
                    }
                    continue 'outer;
                }
            }
            let c = chars[i];
            if is_emoji(c) {
                stats.dropped += 1;
                i += 1;
                while i < chars.len() && is_emoji_modifier(chars[i]) {
                    i += 1;
                }
                buf.push(' ');
                continue;
            }
            if !is_emoji_modifier(c) {
                buf.push(c);
            }
            i += 1;
        }
        if !buf.is_empty() {
            pieces.push(Piece::Text(buf));
        }
        (pieces, stats)
    }

    /// Text-level form of [`EmoticonTable::split`]: category tokens are
    /// surrounded by spaces.
    pub fn map(&self, text: &str) -> (String, EmoticonStats) {
        let (pieces, stats) = self.split(text);
        let mut out = String::new();
        for p in pieces {
            match p {
                Piece::Text(t) => out.push_str(&t),
                Piece::Category(c) => {
                    out.push(' ');
                    out.push_str(c.token());
                    out.push(' ');
                }
            }
        }
        (out, stats)
    }
}

fn decode_code_points(key: &str) -> std::result::Result<String, String> {
    key.split([' ', '+'])
        .filter(|p| !p.is_empty() && !p.eq_ignore_ascii_case("u"))
        .map(|p| {
            let hex = p.trim_start_matches(['U', 'u']).trim_start_matches('+');
            u32::from_str_radix(hex, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| format!("bad code point '{p}'"))
        })
        .collect()
}

/// Pictographic code points treated as emoji.
pub fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F300..=0x1F5FF
        | 0x1F600..=0x1F64F
        | 0x1F680..=0x1F6FF
        | 0x1F700..=0x1F77F
        | 0x1F900..=0x1F9FF
        | 0x1FA70..=0x1FAFF
        | 0x1F1E6..=0x1F1FF
        | 0x2600..=0x26FF
        | 0x2700..=0x27BF
        | 0x2B50 | 0x2B55)
}

fn is_emoji_modifier(c: char) -> bool {
    matches!(c as u32, 0xFE0E | 0xFE0F | 0x200D | 0x1F3FB..=0x1F3FF | 0x20E3)
}
