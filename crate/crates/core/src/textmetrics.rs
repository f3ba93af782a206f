//! Automatic text metrics: corpus BLEU, intra/inter unique n-gram ratios,
//! length ratio and perplexity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to zero n-gram precisions when smoothing is enabled.
pub const BLEU_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    None,
    /// Replace a zero matched count by `epsilon` before dividing.
    Epsilon(f64),
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU over aligned (hypothesis, reference) pairs: clipped
/// k-gram matches for k = 1..=n are summed over the corpus before dividing,
/// then combined by geometric mean and scaled by the brevity penalty.
pub fn corpus_bleu<T: Hash + Eq>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    n: usize,
    smoothing: Smoothing,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            let hc = ngram_counts(h, k);
            let rc = ngram_counts(rf, k);
            for (g, cnt) in &hc {
                matched += (*cnt).min(rc.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        if total == 0 {
            return Ok(0.0);
        }
        let m = match (matched, smoothing) {
            (0, Smoothing::Epsilon(eps)) => eps,
            (0, Smoothing::None) => return Ok(0.0),
            (m, _) => m as f64,
        };
        log_p += (m / total as f64).ln();
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_p / n as f64).exp())
}

/// Single-pair BLEU-n without smoothing.
pub fn bleu_n<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> Result<f64> {
    corpus_bleu(&[hyp.to_vec()], &[reference.to_vec()], n, Smoothing::None)
}

/// Distinct n-grams over total n-grams within one text. Texts shorter than
/// `n` count as fully unique.
pub fn intra_unique_n<T: Hash + Eq>(tokens: &[T], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        debug!("text of {} tokens is too short for {n}-grams; ratio set to 1", tokens.len());
        return 1.0;
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[T]> = tokens.windows(n).collect();
    distinct.len() as f64 / total as f64
}

/// Distinct n-grams pooled over a corpus of generations divided by the
/// pooled n-gram count.
pub fn inter_unique_n<T: Hash + Eq>(texts: &[Vec<T>], n: usize) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Empty("generation corpus"));
    }
    let mut distinct: HashSet<&[T]> = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        if n > 0 && t.len() >= n {
            total += t.len() - n + 1;
            distinct.extend(t.windows(n));
        }
    }
    if total == 0 {
        debug!("no {n}-grams in corpus; ratio set to 1");
        return Ok(1.0);
    }
    Ok(distinct.len() as f64 / total as f64)
}

/// Mean of generation length over reference length. Pairs with an empty
/// reference are skipped.
pub fn length_ratio<T>(gens: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if gens.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} generations but {} references",
            gens.len(),
            refs.len()
        )));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (g, r) in gens.iter().zip(refs) {
        if r.is_empty() {
            debug!("skipping pair with empty reference");
            continue;
        }
        sum += g.len() as f64 / r.len() as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Empty("references"));
    }
    Ok(sum / used as f64)
}

pub fn perplexity(nll: f64) -> f64 {
    nll.exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-token negative log-likelihood, natural log.
    pub nll: f64,
    pub ppl: f64,
    pub bleu: BTreeMap<usize, f64>,
    /// Mean over generations.
    pub intra_unique: BTreeMap<usize, f64>,
    pub inter_unique: BTreeMap<usize, f64>,
    pub length_ratio: f64,
}

/// Full report: BLEU-3/4/5 (epsilon-smoothed from order 4), intra-unique 1/2,
/// inter-unique 2/3 and length ratio.
pub fn metrics_report<T: Hash + Eq>(gens: &[Vec<T>], refs: &[Vec<T>], nll: f64) -> Result<MetricsReport> {
    if gens.is_empty() {
        return Err(Error::Empty("generations"));
    }
    let mut bleu = BTreeMap::new();
    for n in [3, 4, 5] {
        let s = if n >= 4 {
            Smoothing::Epsilon(BLEU_EPSILON)
        } else {
            Smoothing::None
        };
        bleu.insert(n, corpus_bleu(gens, refs, n, s)?);
    }
    let mut intra = BTreeMap::new();
    for n in [1, 2] {
        let m = gens.iter().map(|g| intra_unique_n(g, n)).sum::<f64>() / gens.len() as f64;
        intra.insert(n, m);
    }
    let mut inter = BTreeMap::new();
    for n in [2, 3] {
        inter.insert(n, inter_unique_n(gens, n)?);
    }
    Ok(MetricsReport {
        nll,
        ppl: perplexity(nll),
        bleu,
        intra_unique: intra,
        inter_unique: inter,
        length_ratio: length_ratio(gens, refs)?,
    })
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<16}{:>10.4}\n", "NLL", self.nll));
        s.push_str(&format!("{:<16}{:>10.4}\n", "PPL", self.ppl));
        for (n, v) in &self.bleu {
            s.push_str(&format!("{:<16}{:>10.4}\n", format!("BLEU-{n}"), v));
        }
        for (n, v) in &self.intra_unique {
            s.push_str(&format!("{:<16}{:>10.4}\n", format!("intra-unique-{n}"), v));
        }
        for (n, v) in &self.inter_unique {
            s.push_str(&format!("{:<16}{:>10.4}\n", format!("inter-unique-{n}"), v));
        }
        s.push_str(&format!("{:<16}{:>10.4}\n", "length ratio", self.length_ratio));
        s
    }
}
