use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const FIRST_CHAR: u32 = 2;

/// Character vocabulary. Ids 0 and 1 are reserved for padding and unknown
/// characters; characters follow in the order given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<u32>,
    pub unknown: usize,
}

impl Vocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if c == '\n' || c == '\r' {
                return Err(Error::Data("line breaks cannot be vocabulary entries".into()));
            }
            if index.insert(c, FIRST_CHAR + i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Sorted set of every character appearing in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(|t| t.chars()).collect();
        Self::new(set.into_iter().collect()).expect("texts are single-line")
    }

    /// Total ids including the two reserved ones.
    pub fn size(&self) -> usize {
        self.chars.len() + FIRST_CHAR as usize
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn tokenize(&self, text: &str) -> Result<Tokens> {
        if text.is_empty() {
            return Err(Error::Data("cannot tokenize empty text".into()));
        }
        let mut unknown = 0;
        let ids = text
            .chars()
            .map(|c| {
                self.index.get(&c).copied().unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        Ok(Tokens { ids, unknown })
    }

    /// Padding is skipped; unknown ids become U+FFFD.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| {
                if i < FIRST_CHAR {
                    '\u{FFFD}'
                } else {
                    self.chars
                        .get((i - FIRST_CHAR) as usize)
                        .copied()
                        .unwrap_or('\u{FFFD}')
                }
            })
            .collect()
    }

    /// One character per line, in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for c in &self.chars {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (n, line) in s.split('\n').enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (None, _) => continue,
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(Error::Data(format!(
                        "vocabulary line {} holds more than one character",
                        n + 1
                    )))
                }
            }
        }
        Self::new(chars)
    }

    /// FNV-1a over the file representation; stored in checkpoints to catch
    /// vocabulary mismatches.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_file_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
