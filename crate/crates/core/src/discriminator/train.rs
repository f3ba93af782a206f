use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::ranking_loss_var;
use super::negatives::{negative_columns, Target};
use super::recall::{recall_at_ks, RecallConfig};
use super::{cohesion_tensor, coherence_tensor, decompose_pairs, DiscKind, DualEncoder, EncoderSpec, Side};
use crate::corpus::{EmbeddingTable, Example, Sentence, TextChunk};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::Mode;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscTrainConfig {
    pub lambda: f64,
    pub delta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
    pub eval: RecallConfig,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            lambda: 2.0,
            delta: 0.2,
            lr: 1e-5,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            clip: None,
            eval: RecallConfig::default(),
        }
    }
}

impl DiscTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.delta > 0.0) || self.batch_size < 2 || !(self.lr > 0.0) {
            return Err(Error::Config {
                key: "discriminator".into(),
                detail: format!(
                    "need lambda >= 0, delta > 0, lr > 0 and batch size >= 2 (got {}, {}, {}, {})",
                    self.lambda, self.delta, self.lr, self.batch_size
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub dev_r1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: DualEncoder<f32>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_dev_r1: f64,
}

/// Step-level trainer. Batches are lists of examples; cohesion batches are
/// turned into sentence pairs inside [`DiscTrainer::step`].
pub struct DiscTrainer<'a> {
    pub model: DualEncoder<f32>,
    pub cfg: DiscTrainConfig,
    table: &'a EmbeddingTable,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
}

enum Batch {
    Coherence(Vec<TextChunk>, Vec<TextChunk>),
    Cohesion(Vec<Sentence>, Vec<Sentence>),
}

impl<'a> DiscTrainer<'a> {
    pub fn new(model: DualEncoder<f32>, table: &'a EmbeddingTable, cfg: DiscTrainConfig) -> Result<Self> {
        cfg.validate()?;
        if table.dim() != model.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding width {} does not match model input {}",
                table.dim(),
                model.dim
            )));
        }
        Ok(DiscTrainer {
            adam: Adam::new(AdamConfig::with_lr(cfg.lr)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd15c),
            model,
            cfg,
            table,
        })
    }

    fn positives(&mut self, batch: &[&Example]) -> Result<Batch> {
        match self.model.kind {
            DiscKind::Coherence => Ok(Batch::Coherence(
                batch.iter().map(|e| e.source.clone()).collect(),
                batch.iter().map(|e| e.target.clone()).collect(),
            )),
            DiscKind::Cohesion => {
                let mut pairs = Vec::new();
                for e in batch {
                    pairs.extend(decompose_pairs(&e.source, &e.target)?);
                }
                let picks = index::sample(&mut self.rng, pairs.len(), batch.len().min(pairs.len()));
                let (mut s, mut t) = (Vec::new(), Vec::new());
                for i in picks {
                    s.push(pairs[i].first.clone());
                    t.push(pairs[i].second.clone());
                }
                Ok(Batch::Cohesion(s, t))
            }
        }
    }

    /// One optimizer step on `batch`; returns the mean ranking loss.
    pub fn step(&mut self, batch: &[&Example]) -> Result<f32> {
        if batch.len() < 2 {
            return Err(Error::InvalidArgument(format!("batch of {} < 2", batch.len())));
        }
        let (src, tgt, cols) = match self.positives(batch)? {
            Batch::Coherence(s, t) => self.prepare(&s, &t, coherence_tensor)?,
            Batch::Cohesion(s, t) => self.prepare(&s, &t, cohesion_tensor)?,
        };
        let b = src.len();
        let mut g = Graph::new();
        let (se, s_stats) = self.model.encode(&mut g, Side::Source, &src, Mode::Train)?;
        let (te, t_stats) = self.model.encode(&mut g, Side::Target, &tgt, Mode::Train)?;
        let sn = g.normalize_rows(se);
        let tn = g.normalize_rows(te);
        let scores = g.matmul_t(sn, tn)?;
        let mut losses = Vec::with_capacity(b);
        for (i, row) in cols.iter().enumerate() {
            let pos = g.pick(scores, &[i * 2 * b + i])?;
            let idx: Vec<usize> = row.iter().map(|&(c, _)| i * 2 * b + c).collect();
            let negs = g.pick(scores, &idx)?;
            losses.push(ranking_loss_var(&mut g, pos, negs, self.cfg.delta, self.cfg.lambda)?);
        }
        let all = g.concat_cols(&losses)?;
        let loss = g.mean(all);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(format!("discriminator loss is {value}")));
        }
        let mut grads = g.backward(loss).map_err(|e| match e {
            Error::NonFinite(d) => Error::Divergence(d),
            other => other,
        })?;
        if let Some(c) = self.cfg.clip {
            clip_global_norm(&mut grads, c);
        }
        self.adam.step(&mut self.model.params, &grads);
        if let Some(s) = s_stats {
            self.model.update_running(Side::Source, &s);
        }
        if let Some(s) = t_stats {
            self.model.update_running(Side::Target, &s);
        }
        Ok(value)
    }

    #[allow(clippy::type_complexity)]
    fn prepare<T: Target>(
        &mut self,
        sources: &[T],
        targets: &[T],
        to_tensor: fn(&T, &EmbeddingTable) -> Result<Tensor<f32>>,
    ) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>, Vec<Vec<(usize, super::NegMethod)>>)> {
        let shuffled = targets
            .iter()
            .map(|t| t.shuffled(&mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let cols = negative_columns(targets, &shuffled, &mut self.rng)?;
        let src = sources.iter().map(|s| to_tensor(s, self.table)).collect::<Result<Vec<_>>>()?;
        let tgt = targets
            .iter()
            .chain(&shuffled)
            .map(|t| to_tensor(t, self.table))
            .collect::<Result<Vec<_>>>()?;
        Ok((src, tgt, cols))
    }

    /// One pass over `train` in shuffled minibatches. A trailing batch with
    /// fewer than two examples is dropped.
    pub fn epoch(&mut self, train: &[Example]) -> Result<(usize, f64)> {
        self.epoch_with(train, &mut |_| {})
    }

    /// [`DiscTrainer::epoch`] reporting every step loss to `on_step`.
    pub fn epoch_with(&mut self, train: &[Example], on_step: &mut dyn FnMut(f32)) -> Result<(usize, f64)> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = self.step(&batch)?;
            on_step(loss);
            total += loss as f64;
            steps += 1;
        }
        Ok((steps, if steps > 0 { total / steps as f64 } else { 0.0 }))
    }
}

/// Train for `cfg.epochs`, keeping the parameters with the best dev R@1.
pub fn train_discriminator(
    kind: DiscKind,
    spec: EncoderSpec,
    train: &[Example],
    dev: &[Example],
    table: &EmbeddingTable,
    cfg: &DiscTrainConfig,
) -> Result<TrainReport> {
    train_discriminator_with(kind, spec, train, dev, table, cfg, &mut |_| {})
}

pub fn train_discriminator_with(
    kind: DiscKind,
    spec: EncoderSpec,
    train: &[Example],
    dev: &[Example],
    table: &EmbeddingTable,
    cfg: &DiscTrainConfig,
    on_step: &mut dyn FnMut(f32),
) -> Result<TrainReport> {
    if train.len() < 2 {
        return Err(Error::Empty("training split"));
    }
    if dev.is_empty() {
        return Err(Error::Empty("dev split"));
    }
    let model = DualEncoder::new(kind, spec, table.dim(), cfg.seed)?;
    let mut trainer = DiscTrainer::new(model, table, cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Params<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        let (steps, mean_loss) = trainer.epoch_with(train, on_step)?;
        let dev_r1 = recall_at_ks(&trainer.model, dev, table, &[1], &cfg.eval)?[0];
        info!(
            "{} epoch {epoch}: loss {mean_loss:.4}, dev R@1 {dev_r1:.4}",
            kind.name()
        );
        history.push(EpochStats {
            epoch,
            steps,
            mean_loss,
            dev_r1,
        });
        if best.as_ref().is_none_or(|b| dev_r1 > b.1) {
            debug!("new best at epoch {epoch}");
            best = Some((epoch, dev_r1, trainer.model.params.clone()));
        }
    }
    let mut model = trainer.model;
    let (best_epoch, best_dev_r1) = match best {
        Some((e, r, p)) => {
            model.params = p;
            (e, r)
        }
        None => (0, 0.0),
    };
    Ok(TrainReport {
        model,
        history,
        best_epoch,
        best_dev_r1,
    })
}
