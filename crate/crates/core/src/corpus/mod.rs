//! Review corpora: ingestion and filtering, splits, vocabulary, frozen
//! embedding tables, and the 5+5 sentence examples every model consumes.

mod dataset;
mod embedding;
mod ingest;
pub mod synth;
mod tokenize;
mod vocab;

use std::fmt;

pub use dataset::{make_examples, read_records, split, write_records, ExampleRecord, SplitRatios};
pub use embedding::{bow_embed, load_embeddings, EmbeddingTable};
pub use ingest::{ingest, CorpusFormat, IngestStats, Ingested, RawReview};
pub use tokenize::{split_sentences, tokenize};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, SENT_SEP, SPECIAL_TOKENS, UNK};

pub type TokenId = u32;

pub const MIN_SENTENCE_TOKENS: usize = 5;
pub const MAX_SENTENCE_TOKENS: usize = 30;
pub const MIN_REVIEW_SENTENCES: usize = 10;
pub const CHUNK_SENTENCES: usize = 5;
pub const MAX_VOCAB: usize = 50_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub tokens: Vec<TokenId>,
    pub surface: Vec<String>,
}

impl Sentence {
    pub fn from_words<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Self {
        Sentence {
            tokens: words.iter().map(|w| vocab.id(w.as_ref())).collect(),
            surface: words.iter().map(|w| w.as_ref().to_string()).collect(),
        }
    }

    pub fn from_ids(ids: &[TokenId], vocab: &Vocab) -> Self {
        Sentence {
            tokens: ids.to_vec(),
            surface: ids.iter().map(|&i| vocab.token(i).to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token-level equality, ignoring surface strings.
    pub fn same_tokens(&self, other: &Sentence) -> bool {
        self.tokens == other.tokens
    }

    /// Reorder tokens (and surfaces) by `perm`, where `perm[i]` is the
    /// source index placed at position `i`.
    pub fn permuted(&self, perm: &[usize]) -> Sentence {
        Sentence {
            tokens: perm.iter().map(|&i| self.tokens[i]).collect(),
            surface: perm.iter().map(|&i| self.surface[i].clone()).collect(),
        }
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.surface.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TextChunk {
    pub sentences: Vec<Sentence>,
}

impl TextChunk {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        TextChunk { sentences }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn same_tokens(&self, other: &TextChunk) -> bool {
        self.sentences.len() == other.sentences.len()
            && self
                .sentences
                .iter()
                .zip(&other.sentences)
                .all(|(a, b)| a.same_tokens(b))
    }

    pub fn permuted(&self, perm: &[usize]) -> TextChunk {
        TextChunk {
            sentences: perm.iter().map(|&i| self.sentences[i].clone()).collect(),
        }
    }

    pub fn last(&self) -> Option<&Sentence> {
        self.sentences.last()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn words(&self) -> Vec<Vec<String>> {
        self.sentences.iter().map(|s| s.surface.clone()).collect()
    }
}

/// A source chunk (first five sentences of a review) and its real target
/// continuation (the next five).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub review_id: String,
    pub source: TextChunk,
    pub target: TextChunk,
}

impl Example {
    pub fn encode(record: &ExampleRecord, vocab: &Vocab) -> Self {
        let chunk = |ss: &[Vec<String>]| {
            TextChunk::new(ss.iter().map(|s| Sentence::from_words(s, vocab)).collect())
        };
        Example {
            review_id: record.review_id.clone(),
            source: chunk(&record.source),
            target: chunk(&record.target),
        }
    }
}

/// Two consecutive sentences, the unit scored for cohesion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub first: Sentence,
    pub second: Sentence,
}
