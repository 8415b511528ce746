// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level toy tokenizer. One word, one id.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const USER_MARKER: &str = "<user>";
pub const ASSISTANT_MARKER: &str = "<asst>";
pub const CUE_WORD: &str = "is";

pub const USER_ID: TokenId = 0;
pub const ASSISTANT_ID: TokenId = 1;
pub const CUE_ID: TokenId = 2;

pub const STANDARD_VOCAB_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}

/// Reserved markers first (`<user>`, `<asst>`, cue word), then `words` in order.
pub fn build_tokenizer<S: AsRef<str>>(words: &[S]) -> Result<Tokenizer> {
    if words.is_empty() {
        return Err(Error::invalid("tokenizer needs at least one word"));
    }
    let all: Vec<String> = [USER_MARKER, ASSISTANT_MARKER, CUE_WORD]
        .into_iter()
        .map(str::to_owned)
        .chain(words.iter().map(|w| w.as_ref().to_owned()))
        .collect();
    if let Some(w) = all
        .iter()
        .find(|w| w.is_empty() || w.chars().any(char::is_whitespace))
    {
        return Err(Error::invalid(format!("invalid word {w:?}")));
    }
    Tokenizer::try_from(all)
}

impl Tokenizer {
    /// Vocabulary covering the four standard attribute schemes and all prompt
    /// templates, padded with unused tokens to [`STANDARD_VOCAB_SIZE`].
    pub fn standard() -> Self {
        let mut words: Vec<String> = super::TEMPLATE_WORDS
            .iter()
            .map(|w| w.to_string())
            .collect();
        for scheme in super::StandardScheme::ALL {
            words.extend(scheme.scheme().labels);
        }
        build_tokenizer(&words)
            .and_then(|t| t.padded_to(STANDARD_VOCAB_SIZE))
            .expect("standard vocabulary is well formed")
    }

    /// Append `<unused_k>` tokens until the vocabulary has `size` entries.
    pub fn padded_to(mut self, size: usize) -> Result<Self> {
        if size < self.words.len() {
            return Err(Error::invalid(format!(
                "vocabulary already has {} words, cannot fit into {size}",
                self.words.len()
            )));
        }
        let mut k = 0;
        while self.words.len() < size {
            let w = format!("<unused_{k}>");
            k += 1;
            if self.index.contains_key(&w) {
                continue;
            }
            self.index.insert(w.clone(), self.words.len() as TokenId);
            self.words.push(w);
        }
        Ok(self)
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown word {word:?}")))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.words
                    .get(id as usize)
                    .map(String::as_str)
                    .ok_or_else(|| Error::invalid(format!("unknown token id {id}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::StandardScheme;
    use proptest::prelude::*;

    #[test]
    fn reserved_ids() {
        let t = build_tokenizer(&["a", "b"]).unwrap();
        assert_eq!(t.id(USER_MARKER).unwrap(), USER_ID);
        assert_eq!(t.id(ASSISTANT_MARKER).unwrap(), ASSISTANT_ID);
        assert_eq!(t.id(CUE_WORD).unwrap(), CUE_ID);
        assert_eq!(t.vocab_size(), 5);
    }

    #[test]
    fn rejects_duplicates_and_unknowns() {
        assert!(build_tokenizer(&["a", "a"]).is_err());
        assert!(build_tokenizer(&["is"]).is_err());
        assert!(build_tokenizer::<&str>(&[]).is_err());
        let t = build_tokenizer(&["a"]).unwrap();
        assert!(t.id("zebra").is_err());
        assert!(t.decode(&[99]).is_err());
    }

    #[test]
    fn animal_labels_are_distinct_single_tokens() {
        let t = Tokenizer::standard();
        let labels = StandardScheme::Animal.scheme().labels;
        assert_eq!(labels.len(), 9);
        let ids = t.encode(&labels).unwrap();
        let unique: std::collections::BTreeSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), 9);
        assert_eq!(t.vocab_size(), STANDARD_VOCAB_SIZE);
    }

    #[test]
    fn serde_round_trip() {
        let t = Tokenizer::standard();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #[test]
        fn encode_decode_is_a_bijection(ids in prop::collection::vec(0u32..STANDARD_VOCAB_SIZE as u32, 0..30)) {
            let t = Tokenizer::standard();
            let words = t.decode(&ids).unwrap();
            prop_assert_eq!(t.encode(&words).unwrap(), ids);
        }
    }
}
