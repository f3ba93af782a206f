use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RawReview, CHUNK_SENTENCES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

/// Shuffle reviews with `seed` and partition them. Dev and test sizes are
/// floored; train takes the remainder.
pub fn split<T: Clone>(items: &[T], ratios: SplitRatios, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let SplitRatios { train, dev, test } = ratios;
    if [train, dev, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || ((train + dev + test) - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split ratios {train}/{dev}/{test} must be in [0,1] and sum to 1"
        )));
    }
    let n = items.len();
    let n_dev = (n as f64 * dev + 1e-9).floor() as usize;
    let n_test = (n as f64 * test + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    let n_train = n - n_dev - n_test;
    Ok((
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_dev]),
        take(&order[n_train + n_dev..]),
    ))
}

/// Serialized form of an example: tokens as strings, resolved against a
/// vocabulary at load time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub review_id: String,
    pub source: Vec<Vec<String>>,
    pub target: Vec<Vec<String>>,
}

/// One example per review from its first ten sentences.
pub fn make_examples(reviews: &[RawReview]) -> Vec<ExampleRecord> {
    reviews
        .iter()
        .filter(|r| r.sentences.len() >= 2 * CHUNK_SENTENCES)
        .map(|r| ExampleRecord {
            review_id: r.id.clone(),
            source: r.sentences[..CHUNK_SENTENCES].to_vec(),
            target: r.sentences[CHUNK_SENTENCES..2 * CHUNK_SENTENCES].to_vec(),
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[ExampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ExampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ExampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        if r.source.len() != CHUNK_SENTENCES || r.target.len() != CHUNK_SENTENCES {
            return Err(Error::data(
                path,
                format!("line {}: expected {CHUNK_SENTENCES}+{CHUNK_SENTENCES} sentences", i + 1),
            ));
        }
        if r.source.iter().chain(&r.target).any(Vec::is_empty) {
            return Err(Error::data(path, format!("line {}: empty sentence", i + 1)));
        }
        out.push(r);
    }
    Ok(out)
}
