//! Recall@K retrieval evaluation: the true target is ranked against
//! negatives built with the training constructions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::negatives::Target;
use super::{cohesion_tensor, coherence_tensor, decompose_pairs, DiscKind, DualEncoder, Side};
use crate::corpus::{EmbeddingTable, Example, Sentence, TextChunk};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallConfig {
    pub n_candidates: usize,
    pub trials: usize,
    pub seed: u64,
    /// Evaluate only the first this-many items as queries; candidates are
    /// still drawn from the whole split.
    pub max_queries: Option<usize>,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig {
            n_candidates: 100,
            trials: 20,
            seed: 0,
            max_queries: None,
        }
    }
}

/// A retrieval problem over `len()` items, each with a true target and a
/// per-trial shuffled version of that target.
pub trait RetrievalTask {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Called at the start of every trial.
    fn prepare(&mut self, trial: usize, rng: &mut ChaCha8Rng) -> Result<()>;

    /// Score of `query`'s source against `item`'s target (or its shuffle).
    fn score(&self, query: usize, item: usize, shuffled: bool) -> f64;

    /// Whether that candidate is token-identical to `query`'s true target.
    fn same(&self, query: usize, item: usize, shuffled: bool) -> bool;
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Mean over trials of the fraction of queries whose true target ranks in
/// the top `k`, for each `k` in `ks`. Ties count against the true target.
pub fn recall_with<T: RetrievalTask>(task: &mut T, ks: &[usize], cfg: &RecallConfig) -> Result<Vec<f64>> {
    let n = task.len();
    if cfg.n_candidates == 0 || cfg.trials == 0 {
        return Err(Error::InvalidArgument("need at least one candidate and one trial".into()));
    }
    if n < cfg.n_candidates {
        return Err(Error::InsufficientCandidates {
            needed: cfg.n_candidates,
            available: n,
        });
    }
    let queries = cfg.max_queries.unwrap_or(n).min(n);
    if queries == 0 {
        return Err(Error::Empty("query set"));
    }
    let mismatches = cfg.n_candidates.div_ceil(2);
    let mut totals = vec![0f64; ks.len()];
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed, trial));
        task.prepare(trial, &mut rng)?;
        let mut hits = vec![0usize; ks.len()];
        let mut others: Vec<usize> = Vec::with_capacity(n);
        for q in 0..queries {
            others.clear();
            others.extend((0..n).filter(|&j| j != q));
            others.shuffle(&mut rng);
            let mut cands: Vec<(usize, bool)> = Vec::with_capacity(cfg.n_candidates);
            if !task.same(q, q, true) {
                cands.push((q, true));
            }
            let mut pool = others.iter().copied();
            while cands.len() < cfg.n_candidates {
                let Some(j) = pool.next() else {
                    return Err(Error::InsufficientCandidates {
                        needed: cfg.n_candidates,
                        available: cands.len(),
                    });
                };
                let shuffled = cands.len() > mismatches;
                if !task.same(q, j, shuffled) {
                    cands.push((j, shuffled));
                }
            }
            let truth = task.score(q, q, false);
            let rank = 1 + cands
                .iter()
                .filter(|&&(j, s)| task.score(q, j, s) >= truth)
                .count();
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank <= k {
                    *h += 1;
                }
            }
        }
        for (t, h) in totals.iter_mut().zip(&hits) {
            *t += *h as f64 / queries as f64;
        }
    }
    Ok(totals.into_iter().map(|t| t / cfg.trials as f64).collect())
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum::<f64>().clamp(-1.0, 1.0)
}

fn embed_units(model: &DualEncoder<f32>, side: Side, inputs: &[crate::Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
    Ok(model.embed(side, inputs)?.into_iter().map(unit).collect())
}

struct CoherenceTask<'a> {
    model: &'a DualEncoder<f32>,
    examples: &'a [Example],
    table: &'a EmbeddingTable,
    src: Vec<Vec<f32>>,
    tgt: Vec<Vec<f32>>,
    shuf: Vec<Vec<f32>>,
    shuffled: Vec<TextChunk>,
}

impl RetrievalTask for CoherenceTask<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn prepare(&mut self, _trial: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.src.is_empty() {
            let s: Vec<_> = self.examples.iter().map(|e| coherence_tensor(&e.source, self.table)).collect::<Result<_>>()?;
            let t: Vec<_> = self.examples.iter().map(|e| coherence_tensor(&e.target, self.table)).collect::<Result<_>>()?;
            self.src = embed_units(self.model, Side::Source, &s)?;
            self.tgt = embed_units(self.model, Side::Target, &t)?;
        }
        self.shuffled = self
            .examples
            .iter()
            .map(|e| e.target.shuffled(rng))
            .collect::<Result<_>>()?;
        let t: Vec<_> = self.shuffled.iter().map(|c| coherence_tensor(c, self.table)).collect::<Result<_>>()?;
        self.shuf = embed_units(self.model, Side::Target, &t)?;
        Ok(())
    }

    fn score(&self, q: usize, item: usize, shuffled: bool) -> f64 {
        dot(&self.src[q], if shuffled { &self.shuf[item] } else { &self.tgt[item] })
    }

    fn same(&self, q: usize, item: usize, shuffled: bool) -> bool {
        let c = if shuffled { &self.shuffled[item] } else { &self.examples[item].target };
        c.same_tokens(&self.examples[q].target)
    }
}

struct CohesionTask<'a> {
    model: &'a DualEncoder<f32>,
    examples: &'a [Example],
    table: &'a EmbeddingTable,
    seconds: Vec<Sentence>,
    shuffled: Vec<Sentence>,
    src: Vec<Vec<f32>>,
    tgt: Vec<Vec<f32>>,
    shuf: Vec<Vec<f32>>,
}

impl RetrievalTask for CohesionTask<'_> {
    fn len(&self) -> usize {
        self.examples.len()
    }

    fn prepare(&mut self, _trial: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut firsts = Vec::with_capacity(self.examples.len());
        self.seconds.clear();
        for e in self.examples {
            let pairs = decompose_pairs(&e.source, &e.target)?;
            let p = &pairs[rng.random_range(0..pairs.len())];
            firsts.push(p.first.clone());
            self.seconds.push(p.second.clone());
        }
        self.shuffled = self.seconds.iter().map(|s| s.shuffled(rng)).collect::<Result<_>>()?;
        let enc = |xs: &[Sentence]| -> Result<Vec<crate::Tensor<f32>>> {
            xs.iter().map(|s| cohesion_tensor(s, self.table)).collect()
        };
        self.src = embed_units(self.model, Side::Source, &enc(&firsts)?)?;
        self.tgt = embed_units(self.model, Side::Target, &enc(&self.seconds)?)?;
        self.shuf = embed_units(self.model, Side::Target, &enc(&self.shuffled)?)?;
        Ok(())
    }

    fn score(&self, q: usize, item: usize, shuffled: bool) -> f64 {
        dot(&self.src[q], if shuffled { &self.shuf[item] } else { &self.tgt[item] })
    }

    fn same(&self, q: usize, item: usize, shuffled: bool) -> bool {
        let c = if shuffled { &self.shuffled[item] } else { &self.seconds[item] };
        c.same_tokens(&self.seconds[q])
    }
}

/// R@K for each `k` in `ks` with batch norm frozen.
pub fn recall_at_ks(
    model: &DualEncoder<f32>,
    eval: &[Example],
    table: &EmbeddingTable,
    ks: &[usize],
    cfg: &RecallConfig,
) -> Result<Vec<f64>> {
    match model.kind {
        DiscKind::Coherence => recall_with(
            &mut CoherenceTask {
                model,
                examples: eval,
                table,
                src: Vec::new(),
                tgt: Vec::new(),
                shuf: Vec::new(),
                shuffled: Vec::new(),
            },
            ks,
            cfg,
        ),
        DiscKind::Cohesion => recall_with(
            &mut CohesionTask {
                model,
                examples: eval,
                table,
                seconds: Vec::new(),
                shuffled: Vec::new(),
                src: Vec::new(),
                tgt: Vec::new(),
                shuf: Vec::new(),
            },
            ks,
            cfg,
        ),
    }
}

pub fn recall_at_k(
    model: &DualEncoder<f32>,
    eval: &[Example],
    table: &EmbeddingTable,
    k: usize,
    cfg: &RecallConfig,
) -> Result<f64> {
    Ok(recall_at_ks(model, eval, table, &[k], cfg)?[0])
}
