//! Closed whitespace vocabulary and fixed-length tokenization.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BEGIN: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Special tokens followed by the sorted set of `words`.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = words.into_iter().collect();
        let mut tokens = vec!["<pad>".to_string(), "<bos>".to_string()];
        tokens.extend(set.into_iter().filter(|w| !w.is_empty()).map(str::to_string));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BEGIN, w1, w2, ..., PAD, ...]` of exactly `max_len` ids; words past
    /// `max_len - 1` are dropped.
    pub fn tokenize(&self, caption: &str, max_len: usize) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(Error::Config("token length must be positive".into()));
        }
        let mut out = Vec::with_capacity(max_len);
        out.push(BEGIN);
        for w in caption.split_whitespace() {
            let id = self.id(w).ok_or_else(|| Error::OutOfVocabulary(w.to_string()))?;
            if out.len() < max_len {
                out.push(id);
            }
        }
        out.resize(max_len, PAD);
        Ok(out)
    }

    /// Words of a token sequence with special tokens removed.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().filter(|&&i| i != PAD && i != BEGIN).filter_map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Positions that are not padding.
pub fn content_mask(ids: &[u32]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD).collect()
}

/// Token ids with padding removed.
pub fn strip_padding(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&i| i != PAD).collect()
}
