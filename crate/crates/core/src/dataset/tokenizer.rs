//! Whitespace/punctuation vocabulary tokenizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{CLS_ID, FIRST_CONTENT_ID, UNK_ID};
use crate::datamodel::CaptionSample;
use crate::error::DataError;

/// Word -> id table. Content ids start at [`FIRST_CONTENT_ID`]; 0/1/2 are
/// reserved for PAD/CLS/UNK.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    words: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Vocab::default()
    }

    /// Build a vocabulary from words, assigning ids in iteration order.
    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let mut v = Vocab::new();
        for w in words {
            v.add(w.into());
        }
        v
    }

    /// Insert a word, returning its id (existing or newly assigned).
    pub fn add(&mut self, word: String) -> u32 {
        let next = FIRST_CONTENT_ID + self.words.len() as u32;
        *self.words.entry(word).or_insert(next)
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.words.get(word).copied()
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words
            .iter()
            .find(|(_, &v)| v == id)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Smallest valid `vocab_size` for a model embedding table.
    pub fn id_space(&self) -> usize {
        self.words
            .values()
            .map(|&v| v as usize + 1)
            .max()
            .unwrap_or(FIRST_CONTENT_ID as usize)
    }
}

/// Lowercase, split on whitespace and punctuation, map through the vocab
/// (unknown words become UNK), prepend CLS.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<CaptionSample, DataError> {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        return Err(DataError::EmptyCaption);
    }
    let mut token_ids = Vec::with_capacity(words.len() + 1);
    token_ids.push(CLS_ID);
    for w in &words {
        token_ids.push(vocab.id_of(w).unwrap_or(UNK_ID));
    }
    Ok(CaptionSample {
        text: text.to_string(),
        token_ids,
    })
}
