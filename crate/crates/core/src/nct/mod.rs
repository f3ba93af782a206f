//! Negative-critical sequence training: REINFORCE on the generator with
//! discriminator rewards whose baselines are the mean scores of constructed
//! negative pairs, alternated with teacher-forced MLE steps.

mod finetune;
mod reinforce;
mod reward;

pub use finetune::{
    evaluate_dev, finetune, finetune_with, DevEval, FinetuneReport, MixRule, RlConfig, RlEpochStats, RlStep,
};
pub use reinforce::{reinforce_gradients, GenAction, GeneratorPolicy, SequencePolicy};
pub use reward::{
    build_ensembles, cohesion_pairs, combined_reward, episode_reward, reward_coherence,
    reward_cohesion, Component, Ensemble, RewardReport, RewardWeights, DEGENERATE_REWARD,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, TextChunk};
use crate::discriminator::{coherence_score, decompose_pairs, DualEncoder};
use crate::error::Result;

/// Itemized scores for a source and a continuation: cohesion of every
/// consecutive pair of `[S; T]` and one coherence value for the chunk pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub coherence: f64,
    pub cohesion_per_pair: Vec<f64>,
    pub cohesion_mean: f64,
    /// Number of pairs lying entirely inside the source.
    pub source_pairs: usize,
}

impl ScoreReport {
    pub fn source_side(&self) -> &[f64] {
        &self.cohesion_per_pair[..self.source_pairs]
    }

    /// The pair formed by the last source and first target sentence.
    pub fn junction(&self) -> Option<f64> {
        self.cohesion_per_pair.get(self.source_pairs).copied()
    }

    pub fn target_side(&self) -> &[f64] {
        let start = (self.source_pairs + 1).min(self.cohesion_per_pair.len());
        &self.cohesion_per_pair[start..]
    }
}

pub fn score_report(
    coherence: &DualEncoder<f32>,
    cohesion: &DualEncoder<f32>,
    table: &EmbeddingTable,
    source: &TextChunk,
    target: &TextChunk,
) -> Result<ScoreReport> {
    let pairs = decompose_pairs(source, target)?;
    let per_pair = reward::score_pairs(cohesion, table, &pairs)?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(ScoreReport {
        coherence: coherence_score(coherence, source, target, table)?,
        cohesion_mean: mean,
        cohesion_per_pair: per_pair,
        source_pairs: source.len().saturating_sub(1),
    })
}
