use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{source_ids, Generator};
use crate::corpus::{EmbeddingTable, Sentence, TextChunk, TokenId, Vocab, BOS, EOS, SENT_SEP};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeLimits {
    pub max_sentences: usize,
    pub max_tokens_per_sentence: usize,
    pub max_total_tokens: usize,
}

impl Default for DecodeLimits {
    fn default() -> Self {
        DecodeLimits {
            max_sentences: 5,
            max_tokens_per_sentence: 30,
            max_total_tokens: 160,
        }
    }
}

impl DecodeLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_sentences == 0 || self.max_tokens_per_sentence < 5 || self.max_total_tokens == 0 {
            return Err(Error::InvalidArgument(format!("bad decode limits {self:?}")));
        }
        Ok(())
    }
}

/// A decoded continuation: the emitted token ids (separators and EOS
/// included), the log-probability of each, and the segmented text.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
    pub chunk: TextChunk,
}

impl Decoded {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

struct Segmenter<'a> {
    vocab: &'a Vocab,
    terminal: [Option<TokenId>; 3],
    max_tokens: usize,
    done: Vec<Sentence>,
    cur: Vec<TokenId>,
}

impl<'a> Segmenter<'a> {
    fn new(vocab: &'a Vocab, max_tokens: usize) -> Self {
        Segmenter {
            vocab,
            terminal: [vocab.get("."), vocab.get("!"), vocab.get("?")],
            max_tokens,
            done: Vec::new(),
            cur: Vec::new(),
        }
    }

    fn push(&mut self, t: TokenId) {
        if t == SENT_SEP || t == EOS {
            self.close();
            return;
        }
        self.cur.push(t);
        if self.terminal.contains(&Some(t)) || self.cur.len() >= self.max_tokens {
            self.close();
        }
    }

    fn close(&mut self) {
        if !self.cur.is_empty() {
            let ids = std::mem::take(&mut self.cur);
            self.done.push(Sentence::from_ids(&ids, self.vocab));
        }
    }

    fn finish(mut self) -> TextChunk {
        self.close();
        TextChunk::new(self.done)
    }
}

/// Split generated ids into sentences at separators and terminal
/// punctuation; empty segments are dropped and EOS ends the text.
pub fn segment(ids: &[TokenId], vocab: &Vocab, max_tokens_per_sentence: usize) -> TextChunk {
    let mut s = Segmenter::new(vocab, max_tokens_per_sentence.max(1));
    for &t in ids {
        if t == EOS {
            break;
        }
        s.push(t);
    }
    s.finish()
}

impl<F: Real> Generator<F> {
    fn decode_with(
        &self,
        table: &EmbeddingTable,
        vocab: &Vocab,
        source: &TextChunk,
        limits: &DecodeLimits,
        mut choose: impl FnMut(&[F]) -> Result<usize>,
    ) -> Result<Decoded> {
        limits.validate()?;
        let mut g = Graph::new();
        let enc = self.encode_source(&mut g, table, &source_ids(source))?;
        let mut state = enc.init.clone();
        let mut prev = BOS;
        let mut seg = Segmenter::new(vocab, limits.max_tokens_per_sentence);
        let mut tokens = Vec::new();
        let mut log_probs = Vec::new();
        while tokens.len() < limits.max_total_tokens {
            let out = self.decode_step(&mut g, table, &enc, prev, &state)?;
            let lp = g.value(out.log_probs).data();
            let y = choose(lp)?;
            tokens.push(y as TokenId);
            log_probs.push(lp[y].as_f64());
            state = out.state;
            prev = y as TokenId;
            if prev == EOS {
                break;
            }
            seg.push(prev);
            if seg.done.len() >= limits.max_sentences {
                break;
            }
        }
        Ok(Decoded {
            tokens,
            log_probs,
            chunk: seg.finish(),
        })
    }

    /// Argmax decoding; ties go to the lowest id.
    pub fn greedy_decode(
        &self,
        table: &EmbeddingTable,
        vocab: &Vocab,
        source: &TextChunk,
        limits: &DecodeLimits,
    ) -> Result<Decoded> {
        self.decode_with(table, vocab, source, limits, |lp| {
            let mut best = 0;
            for (i, &x) in lp.iter().enumerate() {
                if x > lp[best] {
                    best = i;
                }
            }
            Ok(best)
        })
    }

    /// Ancestral sampling from the decoder distribution.
    pub fn sample_decode(
        &self,
        table: &EmbeddingTable,
        vocab: &Vocab,
        source: &TextChunk,
        limits: &DecodeLimits,
        rng: &mut impl Rng,
    ) -> Result<Decoded> {
        self.decode_with(table, vocab, source, limits, |lp| {
            let w = WeightedIndex::new(lp.iter().map(|x| x.as_f64().exp()))
                .map_err(|e| Error::NonFinite(format!("decoder distribution: {e}")))?;
            Ok(w.sample(rng))
        })
    }
}
