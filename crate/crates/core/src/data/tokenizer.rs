use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

/// Word-level vocabulary: reserved tokens, then corpus words in first-occurrence order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let ids = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { vocab, ids }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut vocab: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for text in corpus {
            for word in text.as_ref().split_whitespace() {
                if !ids.contains_key(word) {
                    ids.insert(word.to_string(), vocab.len());
                    vocab.push(word.to_string());
                }
            }
        }
        Self { vocab, ids }
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    /// Word ids without BOS/EOS; unknown words map to `[UNK]`.
    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// `[BOS] words… [EOS]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode_words(text));
        ids.push(EOS);
        ids
    }

    /// Joins words with single spaces, dropping PAD, BOS and EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|id| ![PAD, BOS, EOS].contains(id))
            .map(|&id| self.word(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
