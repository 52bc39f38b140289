//! Word-level fixture vocabularies.
//!
//! The toy model has no natural-language tokenizer. Fixtures instead ship a
//! table of words where the index of a word is its token id. Ids 0 and 1
//! are always the BOS and EOS markers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention::TokenSpan;
use crate::error::{Error, Result};
use crate::model::{BOS_ID, EOS_ID};
use crate::TokenId;

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabFile) -> Result<Self> {
        Vocabulary::new(file.tokens)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.words }
    }
}

/// Decoded text plus the character span each token occupies in it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub text: String,
    pub spans: Vec<TokenSpan>,
}

impl Vocabulary {
    /// Builds a vocabulary; entries are lowercased and must be unique.
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least the BOS and EOS entries".to_string(),
            ));
        }
        let words: Vec<String> = words.into_iter().map(|w| w.to_lowercase()).collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(&word.to_lowercase()).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Splits on whitespace and ASCII punctuation, lowercases, and maps each
    /// word to its id. Unknown words map to `<unk>` when the table has it.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let unk = self.id(UNK);
        text.split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '\'' && c != '-'))
            .filter(|w| !w.is_empty())
            .map(|w| {
                self.id(w)
                    .or(unk)
                    .ok_or_else(|| Error::InvalidArgument(format!("word `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    /// Renders tokens separated by single spaces. BOS and EOS render as
    /// nothing and get an empty span at the current position.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Decoded> {
        let mut text = String::new();
        let mut chars = 0usize;
        let mut spans = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let word = self.word(t).ok_or(Error::TokenOutOfRange {
                id: t,
                vocab: self.len(),
            })?;
            if t == BOS_ID || t == EOS_ID {
                spans.push(TokenSpan::with_len(chars, 0));
                continue;
            }
            if !text.is_empty() {
                text.push(' ');
                chars += 1;
            }
            let n = word.chars().count();
            spans.push(TokenSpan::with_len(chars, n));
            text.push_str(word);
            chars += n;
        }
        Ok(Decoded { text, spans })
    }
}
