use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Sentence, TokenId, Vocab, BOS, EOS, PAD, SENT_SEP, UNK};
use crate::error::{Error, Result};
use crate::params::hex;
use crate::tensor::Tensor;

const MARKER_SEED: u64 = 0x5eed_0e3b;

/// Frozen `|V| x d` word vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    pub frozen: bool,
    /// Fraction of non-special vocabulary entries found in the file.
    pub coverage: f64,
}

impl EmbeddingTable {
    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding data of length {} is not a multiple of d={dim}",
                data.len()
            )));
        }
        Ok(EmbeddingTable {
            dim,
            data,
            frozen: true,
            coverage: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, id: TokenId) -> &[f32] {
        let i = (id as usize).min(self.rows() - 1);
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Stack the rows for `ids` into an `[len, d]` tensor.
    pub fn lookup(&self, ids: &[TokenId]) -> Result<Tensor<f32>> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.row(id));
        }
        Tensor::new(vec![ids.len(), self.dim], data)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for x in &self.data {
            h.update(x.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Load whitespace-separated text vectors for `vocab`. An optional
/// `count dim` header line is skipped. Missing words receive the mean of all
/// file vectors; PAD is zero; BOS/EOS/SEP get fixed pseudo-random vectors.
pub fn load_embeddings(path: &Path, vocab: &Vocab, dim: usize) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, vocab, dim).map_err(|e| match e {
        Error::InvalidArgument(d) => Error::data(path, d),
        other => other,
    })
}

pub(crate) fn parse_embeddings(text: &str, vocab: &Vocab, dim: usize) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
    }
    let n = vocab.len();
    let mut data = vec![0f32; n * dim];
    let mut found = vec![false; n];
    let mut sum = vec![0f64; dim];
    let mut loaded = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if lineno == 0 && rest.len() == 1 && word.parse::<u64>().is_ok() && rest[0].parse::<u64>().is_ok() {
            continue;
        }
        if rest.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected {dim} values, found {}",
                lineno + 1,
                rest.len()
            )));
        }
        let vec: Vec<f32> = rest
            .iter()
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("line {}: {e}", lineno + 1)))?;
        for (s, &x) in sum.iter_mut().zip(&vec) {
            *s += x as f64;
        }
        loaded += 1;
        if let Some(id) = vocab.get(word) {
            if !Vocab::is_special(id) && !found[id as usize] {
                let i = id as usize;
                data[i * dim..(i + 1) * dim].copy_from_slice(&vec);
                found[i] = true;
            }
        }
    }
    if loaded == 0 {
        return Err(Error::InvalidArgument("embedding file has no vectors".into()));
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / loaded as f64) as f32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(MARKER_SEED);
    let scale = 1.0 / (dim as f32).sqrt();
    for id in 0..n {
        let t = id as TokenId;
        let row = &mut data[id * dim..(id + 1) * dim];
        match t {
            PAD => row.fill(0.0),
            BOS | EOS | SENT_SEP => {
                for x in row.iter_mut() {
                    *x = rng.random_range(-scale..scale);
                }
            }
            UNK => row.copy_from_slice(&mean),
            _ if !found[id] => row.copy_from_slice(&mean),
            _ => {}
        }
    }
    let words = vocab.words().len();
    let hits = found.iter().filter(|&&f| f).count();
    Ok(EmbeddingTable {
        dim,
        data,
        frozen: true,
        coverage: if words == 0 { 0.0 } else { hits as f64 / words as f64 },
    })
}

/// Mean of a sentence's word vectors.
pub fn bow_embed(sentence: &Sentence, table: &EmbeddingTable) -> Result<Vec<f32>> {
    if sentence.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let d = table.dim();
    let mut acc = vec![0f64; d];
    for &t in &sentence.tokens {
        for (a, &x) in acc.iter_mut().zip(table.row(t)) {
            *a += x as f64;
        }
    }
    let n = sentence.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}
