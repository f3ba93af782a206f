//! Discriminator rewards with negative-ensemble baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, Example, Sentence, SentencePair, TextChunk};
use crate::discriminator::{
    coherence_tensor, cohesion_tensor, decompose_pairs, expect_kind, make_negatives_coherence,
    make_negatives_cohesion, DiscKind, DualEncoder,
};
use crate::error::{Error, Result};

/// Reward assigned to both components when a generation has no sentences.
pub const DEGENERATE_REWARD: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub coherence: f64,
    pub cohesion: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            coherence: 0.5,
            cohesion: 0.5,
        }
    }
}

impl RewardWeights {
    /// Weights must be non-negative and sum to one; all-zero weights are
    /// accepted and turn fine-tuning into plain MLE continuation.
    pub fn validate(&self) -> Result<()> {
        let s = self.coherence + self.cohesion;
        if self.coherence < 0.0 || self.cohesion < 0.0 || !((s - 1.0).abs() < 1e-9 || s == 0.0) {
            return Err(Error::Config {
                key: "rl.weights".into(),
                detail: format!("weights {} and {} must sum to 1", self.coherence, self.cohesion),
            });
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.coherence == 0.0 && self.cohesion == 0.0
    }
}

pub fn combined_reward(r_coherence: f64, r_cohesion: f64, w: &RewardWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.coherence * r_coherence + w.cohesion * r_cohesion)
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("negative ensemble"));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub raw: f64,
    pub baseline: f64,
    pub reward: f64,
}

/// `D(S, T_gen)` minus the plain mean of `D(S, T~)` over the ensemble.
pub fn reward_coherence(
    disc: &DualEncoder<f32>,
    table: &EmbeddingTable,
    source: &TextChunk,
    generated: &TextChunk,
    negatives: &[TextChunk],
) -> Result<Component> {
    expect_kind(disc, DiscKind::Coherence)?;
    if negatives.is_empty() {
        return Err(Error::Empty("negative ensemble"));
    }
    if generated.is_empty() {
        return Err(Error::Empty("generated text"));
    }
    let mut targets = Vec::with_capacity(negatives.len() + 1);
    targets.push(coherence_tensor(generated, table)?);
    for n in negatives {
        targets.push(coherence_tensor(n, table)?);
    }
    let scores = disc.score_many(&coherence_tensor(source, table)?, &targets)?;
    let baseline = mean(&scores[1..])?;
    Ok(Component {
        raw: scores[0],
        baseline,
        reward: scores[0] - baseline,
    })
}

/// Per-pair cohesion over `[S_-1; T_gen]` (so `|T_gen|` pairs), their mean,
/// and the reward against the mean negative-pair score.
pub fn reward_cohesion(
    disc: &DualEncoder<f32>,
    table: &EmbeddingTable,
    source_last: &Sentence,
    generated: &TextChunk,
    negatives: &[SentencePair],
) -> Result<(Component, Vec<f64>)> {
    expect_kind(disc, DiscKind::Cohesion)?;
    if generated.is_empty() {
        return Err(Error::Empty("generated text"));
    }
    let pairs = cohesion_pairs(source_last, generated);
    let per_pair = score_pairs(disc, table, &pairs)?;
    let neg = score_pairs(disc, table, negatives)?;
    let raw = mean(&per_pair)?;
    let baseline = mean(&neg)?;
    Ok((
        Component {
            raw,
            baseline,
            reward: raw - baseline,
        },
        per_pair,
    ))
}

/// `(S_-1, t1), (t1, t2), ...`
pub fn cohesion_pairs(source_last: &Sentence, generated: &TextChunk) -> Vec<SentencePair> {
    std::iter::once(source_last)
        .chain(&generated.sentences)
        .collect::<Vec<_>>()
        .windows(2)
        .map(|w| SentencePair {
            first: w[0].clone(),
            second: w[1].clone(),
        })
        .collect()
}

/// Score pairs, grouping by identical first sentence to share encodings.
pub(crate) fn score_pairs(
    disc: &DualEncoder<f32>,
    table: &EmbeddingTable,
    pairs: &[SentencePair],
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; pairs.len()];
    let mut done = vec![false; pairs.len()];
    for i in 0..pairs.len() {
        if done[i] {
            continue;
        }
        let group: Vec<usize> = (i..pairs.len())
            .filter(|&j| !done[j] && pairs[j].first == pairs[i].first)
            .collect();
        let targets = group
            .iter()
            .map(|&j| cohesion_tensor(&pairs[j].second, table))
            .collect::<Result<Vec<_>>>()?;
        let scores = disc.score_many(&cohesion_tensor(&pairs[i].first, table)?, &targets)?;
        for (&j, s) in group.iter().zip(scores) {
            out[j] = s;
            done[j] = true;
        }
    }
    Ok(out)
}

/// Baseline ensembles for one example: `2B - 1` coherence negatives of its
/// real target, and `2B - 1` cohesion negatives around one of its real
/// consecutive pairs.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub coherence: Vec<TextChunk>,
    pub cohesion: Vec<SentencePair>,
}

pub fn build_ensembles(batch: &[Example], rng: &mut impl Rng) -> Result<Vec<Ensemble>> {
    let mut pairs = Vec::with_capacity(batch.len());
    for e in batch {
        let all = decompose_pairs(&e.source, &e.target)?;
        pairs.push(all[rng.random_range(0..all.len())].clone());
    }
    (0..batch.len())
        .map(|i| {
            let coherence = make_negatives_coherence(batch, i, rng)?
                .items
                .into_iter()
                .map(|n| n.target)
                .collect();
            let cohesion = make_negatives_cohesion(&pairs, i, rng)?
                .items
                .into_iter()
                .map(|n| SentencePair {
                    first: pairs[i].first.clone(),
                    second: n.target,
                })
                .collect();
            Ok(Ensemble { coherence, cohesion })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub coherence: Component,
    pub cohesion: Component,
    pub cohesion_pairs: Vec<f64>,
    pub r_total: f64,
    pub degenerate: bool,
}

/// Full reward for one generated continuation.
pub fn episode_reward(
    coherence: &DualEncoder<f32>,
    cohesion: &DualEncoder<f32>,
    table: &EmbeddingTable,
    source: &TextChunk,
    generated: &TextChunk,
    ensemble: &Ensemble,
    weights: &RewardWeights,
) -> Result<RewardReport> {
    let last = source.last().ok_or(Error::Empty("source"))?;
    if generated.is_empty() {
        let sentinel = Component {
            raw: DEGENERATE_REWARD,
            baseline: 0.0,
            reward: DEGENERATE_REWARD,
        };
        return Ok(RewardReport {
            coherence: sentinel,
            cohesion: sentinel,
            cohesion_pairs: Vec::new(),
            r_total: combined_reward(DEGENERATE_REWARD, DEGENERATE_REWARD, weights)?,
            degenerate: true,
        });
    }
    let coh = reward_coherence(coherence, table, source, generated, &ensemble.coherence)?;
    let (cohes, pairs) = reward_cohesion(cohesion, table, last, generated, &ensemble.cohesion)?;
    Ok(RewardReport {
        r_total: combined_reward(coh.reward, cohes.reward, weights)?,
        coherence: coh,
        cohesion: cohes,
        cohesion_pairs: pairs,
        degenerate: false,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::synth::{build, SynthConfig, SynthData};
    use crate::discriminator::{weighted_avg, EncoderSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> (SynthData, DualEncoder<f32>, DualEncoder<f32>) {
        let cfg = SynthConfig {
            reviews: 40,
            topics: 3,
            locations: 2,
            dim: 8,
            ..Default::default()
        };
        let data = build(&cfg, 0).unwrap();
        let coh = DualEncoder::new(DiscKind::Coherence, EncoderSpec::conv(&[2, 3], 4, 4), 8, 1).unwrap();
        let cohes = DualEncoder::new(DiscKind::Cohesion, EncoderSpec::conv(&[2, 3], 4, 4), 8, 2).unwrap();
        (data, coh, cohes)
    }

    #[test]
    fn combined_reward_cases() {
        let w = RewardWeights::default();
        assert!((combined_reward(0.4, -0.2, &w).unwrap() - 0.1).abs() < 1e-15);
        let only = RewardWeights {
            coherence: 1.0,
            cohesion: 0.0,
        };
        assert_eq!(combined_reward(0.3, 0.9, &only).unwrap(), 0.3);
        assert_eq!(combined_reward(2.0, 2.0, &w).unwrap(), 2.0);
        assert_eq!(combined_reward(-2.0, -2.0, &w).unwrap(), -2.0);
        let bad = RewardWeights {
            coherence: 0.6,
            cohesion: 0.6,
        };
        assert!(combined_reward(0.1, 0.1, &bad).is_err());
        assert!(RewardWeights { coherence: 0.0, cohesion: 0.0 }.validate().is_ok());
    }

    #[test]
    fn reward_is_zero_at_the_ensemble_mean() {
        let (d, coh, cohes) = tiny();
        let e = &d.train[0];
        let negs = vec![e.target.clone(); 3];
        let c = reward_coherence(&coh, &d.table, &e.source, &e.target, &negs).unwrap();
        assert_eq!(c.reward, 0.0);
        let pairs = cohesion_pairs(e.source.last().unwrap(), &e.target);
        let (k, per) = reward_cohesion(&cohes, &d.table, e.source.last().unwrap(), &e.target, &pairs).unwrap();
        assert_eq!(per.len(), 5);
        assert!(k.reward.abs() < 1e-15);
        assert!(reward_coherence(&coh, &d.table, &e.source, &e.target, &[]).is_err());
    }

    #[test]
    fn cohesion_pairs_include_the_junction() {
        let (d, _, _) = tiny();
        let e = &d.train[0];
        let last = e.source.last().unwrap();
        let p = cohesion_pairs(last, &e.target);
        assert_eq!(p.len(), 5);
        assert_eq!(&p[0].first, last);
        assert_eq!(p[0].second, e.target.sentences[0]);
        assert_eq!(p[4].second, e.target.sentences[4]);
        let one = TextChunk::new(vec![e.target.sentences[2].clone()]);
        assert_eq!(cohesion_pairs(last, &one).len(), 1);
    }

    #[test]
    fn baseline_is_the_plain_mean() {
        let (d, coh, _) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = &d.train[..4];
        let ens = build_ensembles(batch, &mut rng).unwrap();
        assert_eq!(ens[0].coherence.len(), 7);
        assert_eq!(ens[0].cohesion.len(), 7);
        let e = &batch[0];
        let c = reward_coherence(&coh, &d.table, &e.source, &e.target, &ens[0].coherence).unwrap();
        let src = coherence_tensor(&e.source, &d.table).unwrap();
        let ts: Vec<_> = ens[0].coherence.iter().map(|t| coherence_tensor(t, &d.table).unwrap()).collect();
        let scores = coh.score_many(&src, &ts).unwrap();
        let plain = scores.iter().sum::<f64>() / scores.len() as f64;
        assert!((c.baseline - plain).abs() < 1e-12);
        assert!((c.baseline - weighted_avg(&scores, 2.0).unwrap()).abs() > 1e-9);
    }

    #[test]
    fn ensemble_order_does_not_matter() {
        let (d, coh, cohes) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = &d.train[..3];
        let ens = build_ensembles(batch, &mut rng).unwrap();
        let e = &batch[1];
        let gen = &batch[2].target;
        let w = RewardWeights::default();
        let a = episode_reward(&coh, &cohes, &d.table, &e.source, gen, &ens[1], &w).unwrap();
        let mut rev = ens[1].clone();
        rev.coherence.reverse();
        rev.cohesion.reverse();
        let b = episode_reward(&coh, &cohes, &d.table, &e.source, gen, &rev, &w).unwrap();
        assert!((a.r_total - b.r_total).abs() < 1e-12);
        assert!(a.r_total.abs() <= 2.0);
        assert!((a.coherence.reward - (a.coherence.raw - a.coherence.baseline)).abs() < 1e-15);
    }

    #[test]
    fn empty_generation_gets_the_sentinel() {
        let (d, coh, cohes) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ens = build_ensembles(&d.train[..2], &mut rng).unwrap();
        let r = episode_reward(
            &coh,
            &cohes,
            &d.table,
            &d.train[0].source,
            &TextChunk::new(vec![]),
            &ens[0],
            &RewardWeights::default(),
        )
        .unwrap();
        assert!(r.degenerate);
        assert_eq!(r.r_total, DEGENERATE_REWARD);
    }

    #[test]
    fn wrong_discriminator_kind_is_refused() {
        let (d, coh, _) = tiny();
        let e = &d.train[0];
        let pairs = cohesion_pairs(e.source.last().unwrap(), &e.target);
        assert!(reward_cohesion(&coh, &d.table, e.source.last().unwrap(), &e.target, &pairs).is_err());
    }
}
