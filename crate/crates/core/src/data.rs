//! Parallel corpora and character vocabularies.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::Side;
use crate::{Error, Result};

pub const UNK: usize = 0;
/// How UNK is rendered when decoding.
pub const UNK_CHAR: char = '\u{FFFD}';

/// Character ↔ id map. Id 0 is UNK; characters follow in code-point order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocabulary {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

/// Ids of an encoded string plus the number of characters mapped to UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unknown: usize,
}

impl From<Vec<char>> for CharVocabulary {
    fn from(chars: Vec<char>) -> Self {
        Self::from_chars(chars)
    }
}

impl From<CharVocabulary> for Vec<char> {
    fn from(v: CharVocabulary) -> Self {
        v.chars
    }
}

impl CharVocabulary {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut chars: Vec<char> = chars.into_iter().collect();
        chars.sort_unstable();
        chars.dedup();
        let ids = chars.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { chars, ids }
    }

    /// Number of ids including UNK.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        if id == UNK {
            None
        } else {
            self.chars.get(id - 1).copied()
        }
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let mut unknown = 0;
        let ids = text
            .chars()
            .map(|c| {
                self.id(c).unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        Encoded { ids, unknown }
    }

    /// Ids outside the vocabulary, UNK included, render as U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.char_of(i).unwrap_or(UNK_CHAR))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub source: CharVocabulary,
    pub target: CharVocabulary,
}

impl Vocabularies {
    pub fn build(corpus: &ParallelCorpus) -> Self {
        Self {
            source: build_vocab(corpus, Side::Encoder),
            target: build_vocab(corpus, Side::Decoder),
        }
    }

    pub fn encode_pair(&self, source: &str, target: &str) -> EncodedPair {
        EncodedPair {
            source: self.source.encode(source).ids,
            target: self.target.encode(target).ids,
        }
    }

    pub fn encode_corpus(&self, corpus: &ParallelCorpus) -> Vec<EncodedPair> {
        corpus
            .pairs
            .iter()
            .map(|(s, t)| self.encode_pair(s, t))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pub pairs: Vec<(String, String)>,
    pub source_lang: Option<String>,
    pub target_lang: Option<String>,
    /// Pairs dropped because one side was empty.
    pub dropped: usize,
}

impl ParallelCorpus {
    /// Keeps pairs with both sides non-empty.
    pub fn from_pairs<I, S, T>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut corpus = ParallelCorpus::default();
        for (s, t) in pairs {
            let (s, t) = (s.into(), t.into());
            if s.is_empty() || t.is_empty() {
                corpus.dropped += 1;
            } else {
                corpus.pairs.push((s, t));
            }
        }
        corpus
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Reads a UTF-8 file and splits it into lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::InvalidUtf8 {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn language_tag(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_string)
}

pub fn load_corpus(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let mut corpus = ParallelCorpus::from_pairs(src.into_iter().zip(tgt));
    if corpus.dropped > 0 {
        log::warn!(
            "dropped {} pair(s) with an empty side from {}",
            corpus.dropped,
            source_path.display()
        );
    }
    corpus.source_lang = language_tag(source_path);
    corpus.target_lang = language_tag(target_path);
    Ok(corpus)
}

pub fn build_vocab(corpus: &ParallelCorpus, side: Side) -> CharVocabulary {
    CharVocabulary::from_chars(corpus.pairs.iter().flat_map(|(s, t)| match side {
        Side::Encoder => s.chars(),
        Side::Decoder => t.chars(),
    }))
}
