use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reinforce::{reinforce_gradients, GenAction, GeneratorPolicy};
use super::reward::{build_ensembles, episode_reward, RewardWeights};
use crate::corpus::{EmbeddingTable, Example, Vocab};
use crate::discriminator::{expect_kind, DiscKind, DualEncoder};
use crate::error::{Error, Result};
use crate::generator::{dev_nll, source_ids, DecodeLimits, GenTrainConfig, Generator, MleTrainer};
use crate::optim::{clip_global_norm, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixRule {
    /// One RL minibatch followed by one teacher-forced MLE minibatch.
    Alternate,
    /// RL updates only.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub gamma: f64,
    pub lr: f64,
    pub mle_lr: f64,
    pub clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: RewardWeights,
    pub mix: MixRule,
    pub limits: DecodeLimits,
    pub seed: u64,
    /// Seed for the fixed dev baseline ensembles.
    pub eval_seed: u64,
    pub max_dev: Option<usize>,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: 1.0,
            lr: 1e-5,
            mle_lr: 1e-5,
            clip: 1.0,
            epochs: 5,
            batch_size: 8,
            weights: RewardWeights::default(),
            mix: MixRule::Alternate,
            limits: DecodeLimits::default(),
            seed: 0,
            eval_seed: 7,
            max_dev: None,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma != 1.0 {
            return Err(Error::Config {
                key: "rl.gamma".into(),
                detail: "only the undiscounted episodic setting (gamma = 1) is supported".into(),
            });
        }
        if self.batch_size < 2 || !(self.lr > 0.0) || !(self.mle_lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config {
                key: "rl".into(),
                detail: "batch size >= 2 and positive learning rates and clip are required".into(),
            });
        }
        self.weights.validate()?;
        self.limits.validate()
    }
}

/// Dev-set generation quality: mean rewards of greedy continuations against
/// fixed baseline ensembles, and teacher-forced perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevEval {
    pub r_total: f64,
    pub r_coherence: f64,
    pub r_cohesion: f64,
    pub nll: f64,
    pub ppl: f64,
    pub degenerate: usize,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlEpochStats {
    pub epoch: usize,
    pub rl_steps: usize,
    pub mle_steps: usize,
    pub mean_r_total: f64,
    pub mean_r_coherence: f64,
    pub mean_r_cohesion: f64,
    pub mle_nll: f64,
    pub degenerate: usize,
    pub dev: DevEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub initial: DevEval,
    pub history: Vec<RlEpochStats>,
}

fn check_discs(coherence: &DualEncoder<f32>, cohesion: &DualEncoder<f32>) -> Result<()> {
    expect_kind(coherence, DiscKind::Coherence)?;
    expect_kind(cohesion, DiscKind::Cohesion)
}

/// Batches of `size` over `0..n`; a trailing singleton is paired with its
/// predecessor so every batch can build negatives. Returns (batch range,
/// first index to score).
fn eval_batches(n: usize, size: usize) -> Vec<(std::ops::Range<usize>, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + size).min(n);
        let lo = if end - start < 2 { end.saturating_sub(2) } else { start };
        out.push((lo..end, start));
        start = end;
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_dev(
    generator: &Generator<f32>,
    coherence: &DualEncoder<f32>,
    cohesion: &DualEncoder<f32>,
    table: &EmbeddingTable,
    vocab: &Vocab,
    dev: &[Example],
    cfg: &RlConfig,
) -> Result<DevEval> {
    check_discs(coherence, cohesion)?;
    let dev = &dev[..cfg.max_dev.unwrap_or(dev.len()).min(dev.len())];
    if dev.len() < 2 {
        return Err(Error::InsufficientCandidates {
            needed: 2,
            available: dev.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    let (mut tot, mut coh, mut cohes) = (0.0, 0.0, 0.0);
    let mut degenerate = 0;
    for (range, first) in eval_batches(dev.len(), cfg.batch_size) {
        let batch = &dev[range.clone()];
        let ens = build_ensembles(batch, &mut rng)?;
        for i in first..range.end {
            let k = i - range.start;
            let out = generator.greedy_decode(table, vocab, &batch[k].source, &cfg.limits)?;
            let r = episode_reward(
                coherence,
                cohesion,
                table,
                &batch[k].source,
                &out.chunk,
                &ens[k],
                &cfg.weights,
            )?;
            tot += r.r_total;
            coh += r.coherence.reward;
            cohes += r.cohesion.reward;
            degenerate += r.degenerate as usize;
        }
    }
    let n = dev.len() as f64;
    let nll = dev_nll(generator, table, dev)?;
    Ok(DevEval {
        r_total: tot / n,
        r_coherence: coh / n,
        r_cohesion: cohes / n,
        nll,
        ppl: nll.exp(),
        degenerate,
        examples: dev.len(),
    })
}

/// Fine-tune `generator` in place. On numeric divergence the parameters
/// from the last completed epoch are restored before the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    generator: &mut Generator<f32>,
    coherence: &DualEncoder<f32>,
    cohesion: &DualEncoder<f32>,
    train: &[Example],
    dev: &[Example],
    table: &EmbeddingTable,
    vocab: &Vocab,
    cfg: &RlConfig,
) -> Result<FinetuneReport> {
    finetune_with(generator, coherence, cohesion, train, dev, table, vocab, cfg, &mut |_| {})
}

/// What a single fine-tuning update did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum RlStep {
    /// Policy-gradient update; mean sampled `R_total` of the minibatch.
    Rl { mean_r_total: f64 },
    Mle { nll: f64 },
}

/// [`finetune`] reporting every update to `on_step`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_with(
    generator: &mut Generator<f32>,
    coherence: &DualEncoder<f32>,
    cohesion: &DualEncoder<f32>,
    train: &[Example],
    dev: &[Example],
    table: &EmbeddingTable,
    vocab: &Vocab,
    cfg: &RlConfig,
    on_step: &mut dyn FnMut(RlStep),
) -> Result<FinetuneReport> {
    cfg.validate()?;
    check_discs(coherence, cohesion)?;
    if train.len() < 2 {
        return Err(Error::Empty("training split"));
    }
    let initial = evaluate_dev(generator, coherence, cohesion, table, vocab, dev, cfg)?;
    info!(
        "before fine-tuning: dev R_total {:.4}, dev PPL {:.4}",
        initial.r_total, initial.ppl
    );
    let mle_cfg = GenTrainConfig {
        lr: cfg.mle_lr,
        clip: cfg.clip,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        max_dev: cfg.max_dev,
    };
    let mut mle = MleTrainer::new(generator.clone(), table, mle_cfg)?;
    let mut rl_adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b47_c4e5);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5a3f_1e00);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let last_good = mle.model.params.clone();
        let result = run_epoch(
            &mut mle,
            &mut rl_adam,
            &mut batch_rng,
            &mut sample_rng,
            coherence,
            cohesion,
            train,
            table,
            vocab,
            cfg,
            on_step,
        );
        let mut stats = match result {
            Ok(s) => s,
            Err(e) => {
                if e.is_numeric() {
                    warn!("fine-tuning diverged in epoch {epoch}; restoring last good parameters");
                    generator.params = last_good;
                } else {
                    generator.params = mle.model.params.clone();
                }
                return Err(e);
            }
        };
        stats.epoch = epoch;
        stats.dev = evaluate_dev(&mle.model, coherence, cohesion, table, vocab, dev, cfg)?;
        info!(
            "rl epoch {epoch}: train R_total {:.4}, dev R_total {:.4}, dev PPL {:.4}",
            stats.mean_r_total, stats.dev.r_total, stats.dev.ppl
        );
        history.push(stats);
    }
    generator.params = mle.model.params;
    Ok(FinetuneReport { initial, history })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    mle: &mut MleTrainer<'_>,
    rl_adam: &mut Adam<f32>,
    batch_rng: &mut ChaCha8Rng,
    sample_rng: &mut ChaCha8Rng,
    coherence: &DualEncoder<f32>,
    cohesion: &DualEncoder<f32>,
    train: &[Example],
    table: &EmbeddingTable,
    vocab: &Vocab,
    cfg: &RlConfig,
    on_step: &mut dyn FnMut(RlStep),
) -> Result<RlEpochStats> {
    let b = cfg.batch_size;
    let mle_order = mle.epoch_order(train.len());
    let mut rl_order: Vec<usize> = (0..train.len()).collect();
    rl_order.shuffle(batch_rng);
    let mut s = RlEpochStats {
        epoch: 0,
        rl_steps: 0,
        mle_steps: 0,
        mean_r_total: 0.0,
        mean_r_coherence: 0.0,
        mean_r_cohesion: 0.0,
        mle_nll: 0.0,
        degenerate: 0,
        dev: DevEval {
            r_total: 0.0,
            r_coherence: 0.0,
            r_cohesion: 0.0,
            nll: 0.0,
            ppl: 0.0,
            degenerate: 0,
            examples: 0,
        },
    };
    let mut episodes_seen = 0usize;
    for (k, mle_chunk) in mle_order.chunks(b).enumerate() {
        let rl_chunk = &rl_order[k * b..((k + 1) * b).min(rl_order.len())];
        if !cfg.weights.is_zero() && rl_chunk.len() >= 2 {
            let batch: Vec<Example> = rl_chunk.iter().map(|&i| train[i].clone()).collect();
            let ens = build_ensembles(&batch, batch_rng)?;
            let mut episodes = Vec::with_capacity(batch.len());
            let mut batch_r = 0.0;
            for (e, en) in batch.iter().zip(&ens) {
                let out = mle.model.sample_decode(table, vocab, &e.source, &cfg.limits, sample_rng)?;
                let r = episode_reward(coherence, cohesion, table, &e.source, &out.chunk, en, &cfg.weights)?;
                s.mean_r_total += r.r_total;
                batch_r += r.r_total;
                s.mean_r_coherence += r.coherence.reward;
                s.mean_r_cohesion += r.cohesion.reward;
                s.degenerate += r.degenerate as usize;
                episodes_seen += 1;
                episodes.push((
                    GenAction {
                        source: source_ids(&e.source),
                        tokens: out.tokens,
                    },
                    r.r_total,
                ));
            }
            let policy = GeneratorPolicy {
                generator: &mle.model,
                table,
            };
            if let Some(mut grads) = reinforce_gradients(&policy, &episodes)? {
                clip_global_norm(&mut grads, cfg.clip);
                rl_adam.step(&mut mle.model.params, &grads);
            }
            s.rl_steps += 1;
            on_step(RlStep::Rl {
                mean_r_total: batch_r / batch.len() as f64,
            });
        }
        if cfg.mix == MixRule::Alternate {
            let batch: Vec<&Example> = mle_chunk.iter().map(|&i| &train[i]).collect();
            let nll = mle.step(&batch)? as f64;
            on_step(RlStep::Mle { nll });
            s.mle_nll += nll;
            s.mle_steps += 1;
        }
    }
    if episodes_seen > 0 {
        let n = episodes_seen as f64;
        s.mean_r_total /= n;
        s.mean_r_coherence /= n;
        s.mean_r_cohesion /= n;
    }
    if s.mle_steps > 0 {
        s.mle_nll /= s.mle_steps as f64;
    }
    Ok(s)
}
