use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{RawReview, TokenId, MAX_VOCAB};
use crate::error::{Error, Result};
use crate::params::hex;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SENT_SEP: TokenId = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build from the ordered non-special tokens. Duplicates and special
    /// spellings are rejected.
    pub fn from_tokens<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        if words.len() > MAX_VOCAB {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} entries, limit is {MAX_VOCAB}",
                words.len()
            )));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.as_ref();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad vocabulary entry {w:?}")));
            }
            if index.insert(w.to_string(), tokens.len() as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry `{w}`")));
            }
            tokens.push(w.to_string());
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == SPECIAL_TOKENS.len()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIAL_TOKENS[UNK as usize])
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIAL_TOKENS.len()..]
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([b'\n']);
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        Vocab::from_tokens(&words).map_err(|e| Error::data(path, e.to_string()))
    }
}

/// Frequency-ranked vocabulary over the given reviews, ties broken
/// lexicographically, capped at [`MAX_VOCAB`].
pub fn build_vocab(train: &[RawReview]) -> Result<Vocab> {
    build_vocab_capped(train, MAX_VOCAB)
}

pub(crate) fn build_vocab_capped(train: &[RawReview], cap: usize) -> Result<Vocab> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in train {
        for s in &r.sentences {
            for t in s {
                if !SPECIAL_TOKENS.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap.min(MAX_VOCAB));
    let words: Vec<&str> = ranked.into_iter().map(|(w, _)| w).collect();
    Vocab::from_tokens(&words)
}
