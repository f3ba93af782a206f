use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{source_ids, target_ids, Generator, GeneratorSpec};
use crate::corpus::{EmbeddingTable, Example};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::Params;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainConfig {
    pub lr: f64,
    pub clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate dev NLL on at most this many examples.
    pub max_dev: Option<usize>,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            lr: 2e-4,
            clip: 1.0,
            epochs: 60,
            batch_size: 16,
            seed: 0,
            max_dev: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub train_nll: f64,
    pub dev_nll: f64,
    pub dev_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct GenTrainReport {
    pub model: Generator<f32>,
    pub history: Vec<GenEpochStats>,
    pub best_epoch: usize,
    pub best_dev_nll: f64,
}

/// Token-weighted mean NLL over `examples` (EOS included).
pub fn dev_nll<F: Real>(model: &Generator<F>, table: &EmbeddingTable, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for e in examples {
        let tgt = target_ids(&e.target);
        let mut g = Graph::new();
        let v = model.nll_sum_var(&mut g, table, &source_ids(&e.source), &tgt)?;
        total += g.scalar(v).as_f64();
        count += tgt.len();
    }
    Ok(total / count as f64)
}

/// Teacher-forced MLE steps with Adam and global-norm clipping.
pub struct MleTrainer<'a> {
    pub model: Generator<f32>,
    pub cfg: GenTrainConfig,
    table: &'a EmbeddingTable,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
}

impl<'a> MleTrainer<'a> {
    pub fn new(model: Generator<f32>, table: &'a EmbeddingTable, cfg: GenTrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.clip > 0.0) {
            return Err(Error::Config {
                key: "generator".into(),
                detail: "batch size, lr and clip must be positive".into(),
            });
        }
        Ok(MleTrainer {
            adam: Adam::new(AdamConfig::with_lr(cfg.lr)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e4),
            model,
            cfg,
            table,
        })
    }

    /// One update on the mean over `batch` of per-example mean token NLL.
    pub fn step(&mut self, batch: &[&Example]) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(batch.len());
        for e in batch {
            let tgt = target_ids(&e.target);
            let s = self.model.nll_sum_var(&mut g, self.table, &source_ids(&e.source), &tgt)?;
            terms.push(g.scale(s, 1.0 / tgt.len() as f32));
        }
        let all = g.concat_cols(&terms)?;
        let loss = g.mean(all);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("generator NLL is {value}")));
        }
        let mut grads = g.backward(loss).map_err(|e| match e {
            Error::NonFinite(d) => Error::Divergence(d),
            other => other,
        })?;
        clip_global_norm(&mut grads, self.cfg.clip);
        self.adam.step(&mut self.model.params, &grads);
        Ok(value)
    }

    /// Shuffled example order for the next epoch.
    pub fn epoch_order(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    pub fn epoch(&mut self, train: &[Example]) -> Result<(usize, f64)> {
        self.epoch_with(train, &mut |_| {})
    }

    pub fn epoch_with(&mut self, train: &[Example], on_step: &mut dyn FnMut(f32)) -> Result<(usize, f64)> {
        let order = self.epoch_order(train.len());
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = self.step(&batch)?;
            on_step(loss);
            total += loss as f64;
            steps += 1;
        }
        Ok((steps, if steps > 0 { total / steps as f64 } else { 0.0 }))
    }
}

/// Pre-train a generator, keeping the parameters with the lowest dev NLL.
pub fn train_mle(
    spec: GeneratorSpec,
    train: &[Example],
    dev: &[Example],
    table: &EmbeddingTable,
    cfg: &GenTrainConfig,
) -> Result<GenTrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let model = Generator::new(spec, cfg.seed)?;
    continue_mle(model, train, dev, table, cfg)
}

/// Continue MLE training from an existing generator.
pub fn continue_mle(
    model: Generator<f32>,
    train: &[Example],
    dev: &[Example],
    table: &EmbeddingTable,
    cfg: &GenTrainConfig,
) -> Result<GenTrainReport> {
    continue_mle_with(model, train, dev, table, cfg, &mut |_| {})
}

pub fn continue_mle_with(
    model: Generator<f32>,
    train: &[Example],
    dev: &[Example],
    table: &EmbeddingTable,
    cfg: &GenTrainConfig,
    on_step: &mut dyn FnMut(f32),
) -> Result<GenTrainReport> {
    let dev = &dev[..cfg.max_dev.unwrap_or(dev.len()).min(dev.len())];
    let mut trainer = MleTrainer::new(model, table, cfg.clone())?;
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Params<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let (steps, train_nll) = trainer.epoch_with(train, on_step)?;
        let d = dev_nll(&trainer.model, table, dev)?;
        info!("generator epoch {epoch}: train NLL {train_nll:.4}, dev NLL {d:.4}");
        history.push(GenEpochStats {
            epoch,
            steps,
            train_nll,
            dev_nll: d,
            dev_ppl: d.exp(),
        });
        if best.as_ref().is_none_or(|b| d < b.1) {
            best = Some((epoch, d, trainer.model.params.clone()));
        }
    }
    let mut model = trainer.model;
    let (best_epoch, best_dev_nll) = match best {
        Some((e, d, p)) => {
            model.params = p;
            (e, d)
        }
        None => (0, f64::NAN),
    };
    Ok(GenTrainReport {
        model,
        history,
        best_epoch,
        best_dev_nll,
    })
}
