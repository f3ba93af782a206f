//! In-batch negative construction: mismatches, order shuffles and their
//! combination.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Sentence, SentencePair, TextChunk};
use crate::error::{Error, Result};

const MAX_SHUFFLE_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegMethod {
    Mismatch,
    Shuffle,
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Negative<T> {
    pub method: NegMethod,
    /// Batch index whose target was used.
    pub from: usize,
    pub target: T,
}

/// The `2B - 1` negatives of one positive; the source stays fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet<T> {
    pub index: usize,
    pub items: Vec<Negative<T>>,
}

impl<T> NegativeSet<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// (mismatch, shuffle, combined) counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let n = |m| self.items.iter().filter(|x| x.method == m).count();
        (n(NegMethod::Mismatch), n(NegMethod::Shuffle), n(NegMethod::Combined))
    }
}

/// Uniform cyclic permutation (Sattolo); never has a fixed point.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Negatives(format!("no derangement of {n} items")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

/// Uniform permutation other than the identity.
pub fn word_shuffle(n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Negatives(format!("cannot shuffle {n} words")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    for _ in 0..MAX_SHUFFLE_TRIES {
        p.shuffle(rng);
        if p.iter().enumerate().any(|(i, &x)| i != x) {
            return Ok(p);
        }
    }
    // astronomically unlikely for n > 2; for n = 2 the swap is the only choice
    p = (0..n).collect();
    p.swap(0, 1);
    Ok(p)
}

/// A target that can be order-shuffled and compared by tokens.
pub trait Target: Clone {
    fn shuffled(&self, rng: &mut impl Rng) -> Result<Self>;
    fn same(&self, other: &Self) -> bool;
}

impl Target for TextChunk {
    fn shuffled(&self, rng: &mut impl Rng) -> Result<Self> {
        Ok(self.permuted(&derangement(self.len(), rng)?))
    }

    fn same(&self, other: &Self) -> bool {
        self.same_tokens(other)
    }
}

impl Target for Sentence {
    fn shuffled(&self, rng: &mut impl Rng) -> Result<Self> {
        Ok(self.permuted(&word_shuffle(self.len(), rng)?))
    }

    fn same(&self, other: &Self) -> bool {
        self.same_tokens(other)
    }
}

/// Column layout for a batch whose score matrix is `B x 2B`: column `j < B`
/// is target `j`, column `B + j` is the shuffled target `j`. For each row
/// this returns the `2B - 1` negative columns with their method. Columns
/// whose content equals the row's positive are replaced by another valid
/// column.
pub(crate) fn negative_columns<T: Target>(
    targets: &[T],
    shuffled: &[T],
    rng: &mut impl Rng,
) -> Result<Vec<Vec<(usize, NegMethod)>>> {
    let b = targets.len();
    if b < 2 {
        return Err(Error::Negatives(format!("batch size {b} < 2")));
    }
    let column = |c: usize| if c < b { &targets[c] } else { &shuffled[c - b] };
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut cols = Vec::with_capacity(2 * b - 1);
        cols.extend((0..b).filter(|&j| j != i).map(|j| (j, NegMethod::Mismatch)));
        cols.push((b + i, NegMethod::Shuffle));
        cols.extend((0..b).filter(|&j| j != i).map(|j| (b + j, NegMethod::Combined)));
        let valid: Vec<usize> = (0..2 * b)
            .filter(|&c| c != i && !column(c).same(&targets[i]))
            .collect();
        if valid.is_empty() {
            return Err(Error::Negatives(format!(
                "every candidate in the batch equals positive {i}"
            )));
        }
        for slot in cols.iter_mut() {
            if column(slot.0).same(&targets[i]) {
                slot.0 = valid[rng.random_range(0..valid.len())];
            }
        }
        out.push(cols);
    }
    Ok(out)
}

fn materialize<T: Target>(
    targets: &[T],
    i: usize,
    rng: &mut impl Rng,
) -> Result<NegativeSet<T>> {
    if i >= targets.len() {
        return Err(Error::InvalidArgument(format!(
            "index {i} outside batch of {}",
            targets.len()
        )));
    }
    let shuffled = targets
        .iter()
        .map(|t| t.shuffled(rng))
        .collect::<Result<Vec<_>>>()?;
    let cols = negative_columns(targets, &shuffled, rng)?.swap_remove(i);
    let b = targets.len();
    let items = cols
        .into_iter()
        .map(|(c, method)| Negative {
            method,
            from: c % b,
            target: if c < b { targets[c].clone() } else { shuffled[c - b].clone() },
        })
        .collect();
    Ok(NegativeSet { index: i, items })
}

/// Negatives for positive `i`: `B - 1` rotated targets, one sentence-order
/// derangement of its own target, and `B - 1` deranged rotated targets.
pub fn make_negatives_coherence(
    batch: &[Example],
    i: usize,
    rng: &mut impl Rng,
) -> Result<NegativeSet<TextChunk>> {
    let targets: Vec<TextChunk> = batch.iter().map(|e| e.target.clone()).collect();
    materialize(&targets, i, rng)
}

/// Negatives for pair `i`, with word shuffles of the next sentence.
pub fn make_negatives_cohesion(
    batch: &[SentencePair],
    i: usize,
    rng: &mut impl Rng,
) -> Result<NegativeSet<Sentence>> {
    let targets: Vec<Sentence> = batch.iter().map(|p| p.second.clone()).collect();
    materialize(&targets, i, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sattolo_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..9 {
            for _ in 0..200 {
                let p = derangement(n, &mut rng).unwrap();
                assert!(p.iter().enumerate().all(|(i, &x)| i != x));
                let mut s = p.clone();
                s.sort();
                assert_eq!(s, (0..n).collect::<Vec<_>>());
            }
        }
        assert!(derangement(1, &mut rng).is_err());
    }

    #[test]
    fn two_word_shuffle_is_the_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert_eq!(word_shuffle(2, &mut rng).unwrap(), [1, 0]);
        }
        assert!(word_shuffle(1, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn word_shuffle_is_a_non_identity_permutation(n in 2usize..30, seed in any::<u64>()) {
            let p = word_shuffle(n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(p.iter().enumerate().any(|(i, &x)| i != x));
            let mut s = p.clone();
            s.sort();
            prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    fn sentence(ids: &[u32]) -> Sentence {
        Sentence {
            tokens: ids.to_vec(),
            surface: ids.iter().map(|i| i.to_string()).collect(),
        }
    }

    #[test]
    fn collisions_are_replaced() {
        let targets = vec![sentence(&[1, 2, 3]), sentence(&[1, 2, 3]), sentence(&[4, 5, 6])];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shuffled: Vec<_> = targets.iter().map(|t| t.shuffled(&mut rng).unwrap()).collect();
        let cols = negative_columns(&targets, &shuffled, &mut rng).unwrap();
        for (i, row) in cols.iter().enumerate() {
            assert_eq!(row.len(), 5);
            for &(c, _) in row {
                let t = if c < 3 { &targets[c] } else { &shuffled[c - 3] };
                assert!(!t.same(&targets[i]));
            }
        }
    }
}
