//! Attention seq2seq generator: two-layer bidirectional GRU encoder, a
//! bridge into a two-layer GRU decoder, additive attention and a vocabulary
//! softmax. Word embeddings come from the frozen table and are never
//! trained.

mod decode;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Header};
use crate::corpus::{EmbeddingTable, TextChunk, TokenId, EOS, SENT_SEP, BOS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Gru, Linear};
use crate::params::{ParamId, Params};
use crate::tensor::{Real, Tensor};

pub use decode::{segment, DecodeLimits, Decoded};
pub use train::{continue_mle, continue_mle_with, dev_nll, train_mle, GenEpochStats, GenTrainConfig, GenTrainReport, MleTrainer};

pub const KIND: &str = "generator";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub vocab: usize,
    /// Embedding width of the frozen table.
    pub dim: usize,
    pub hidden: usize,
    pub attention: usize,
}

impl GeneratorSpec {
    pub fn new(vocab: usize, dim: usize, hidden: usize, attention: usize) -> Self {
        GeneratorSpec {
            vocab,
            dim,
            hidden,
            attention,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 6 || self.dim == 0 || self.hidden == 0 || self.attention == 0 {
            return Err(Error::InvalidArgument(format!("degenerate generator spec {self:?}")));
        }
        Ok(())
    }
}

/// Sentences joined by the separator token.
pub fn source_ids(chunk: &TextChunk) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(chunk.token_count() + chunk.len());
    for (i, s) in chunk.sentences.iter().enumerate() {
        if i > 0 {
            out.push(SENT_SEP);
        }
        out.extend_from_slice(&s.tokens);
    }
    out
}

/// Decoder targets: separator-joined sentences followed by EOS. The decoder
/// input is BOS followed by all but the last of these.
pub fn target_ids(chunk: &TextChunk) -> Vec<TokenId> {
    let mut out = source_ids(chunk);
    out.push(EOS);
    out
}

#[derive(Debug, Clone)]
pub struct Generator<F> {
    pub spec: GeneratorSpec,
    pub params: Params<F>,
    encoder: [Gru; 4],
    bridge: [Linear; 2],
    decoder: [Gru; 2],
    att_key: Linear,
    att_query: Linear,
    att_v: ParamId,
    combine: Linear,
    out: Linear,
}

/// Encoder output for one source: contextual states `[L, 2h]`, their
/// attention keys `[L, a]`, and the bridged initial decoder states.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub states: Var,
    pub keys: Var,
    pub init: Vec<Var>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct StepOut {
    /// `[1, V]` log-probabilities.
    pub log_probs: Var,
    /// `[1, L]` attention weights.
    pub attention: Var,
    pub state: Vec<Var>,
}

impl<F: Real> Generator<F> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &mut Params::new();
        let (d, h, a) = (spec.dim, spec.hidden, spec.attention);
        let encoder = [
            Gru::new(p, "enc.l0.fwd", d, h, &mut rng),
            Gru::new(p, "enc.l0.bwd", d, h, &mut rng),
            Gru::new(p, "enc.l1.fwd", 2 * h, h, &mut rng),
            Gru::new(p, "enc.l1.bwd", 2 * h, h, &mut rng),
        ];
        let bridge = [
            Linear::new(p, "bridge.l0", 2 * h, h, &mut rng),
            Linear::new(p, "bridge.l1", 2 * h, h, &mut rng),
        ];
        let decoder = [
            Gru::new(p, "dec.l0", d, h, &mut rng),
            Gru::new(p, "dec.l1", h, h, &mut rng),
        ];
        let att_key = Linear::new(p, "att.key", 2 * h, a, &mut rng);
        let att_query = Linear::new(p, "att.query", h, a, &mut rng);
        let att_v = p.add_uniform("att.v", &[1, a], 1.0 / (a as f64).sqrt(), &mut rng);
        let combine = Linear::new(p, "out.combine", 3 * h, h, &mut rng);
        let out = Linear::new(p, "out.proj", h, spec.vocab, &mut rng);
        Ok(Generator {
            params: std::mem::take(p),
            spec,
            encoder,
            bridge,
            decoder,
            att_key,
            att_query,
            att_v,
            combine,
            out,
        })
    }

    fn embed(&self, table: &EmbeddingTable, ids: &[TokenId]) -> Result<Tensor<F>> {
        if table.dim() != self.spec.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding width {} does not match generator input {}",
                table.dim(),
                self.spec.dim
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.spec.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.spec.vocab
            )));
        }
        Ok(table.lookup(ids)?.cast())
    }

    /// Encode a source token sequence.
    pub fn encode_source(&self, g: &mut Graph<F>, table: &EmbeddingTable, src: &[TokenId]) -> Result<Encoded> {
        if src.is_empty() {
            return Err(Error::Empty("source"));
        }
        let p = &self.params;
        let h = self.spec.hidden;
        let x = self.embed(table, src)?;
        let x = g.input(x);
        let h0 = g.input(Tensor::zeros(&[1, h]));
        let mut layer_in = x;
        let mut finals = (h0, h0);
        for l in 0..2 {
            let f = self.encoder[2 * l].run(g, p, layer_in, h0, false)?;
            let b = self.encoder[2 * l + 1].run(g, p, layer_in, h0, true)?;
            finals = (*f.last().unwrap(), b[0]);
            let f_all = g.concat_rows(&f)?;
            let b_all = g.concat_rows(&b)?;
            layer_in = g.concat_cols(&[f_all, b_all])?;
        }
        let last = g.concat_cols(&[finals.0, finals.1])?;
        let mut init = Vec::with_capacity(2);
        for br in &self.bridge {
            let z = br.forward(g, p, last)?;
            init.push(g.tanh(z));
        }
        let keys = self.att_key.forward(g, p, layer_in)?;
        Ok(Encoded {
            states: layer_in,
            keys,
            init,
            len: src.len(),
        })
    }

    /// One decoder step from the previous token.
    pub fn decode_step(
        &self,
        g: &mut Graph<F>,
        table: &EmbeddingTable,
        enc: &Encoded,
        prev: TokenId,
        state: &[Var],
    ) -> Result<StepOut> {
        if state.len() != 2 {
            return Err(Error::shape("decode_step", format!("{} decoder layers", state.len())));
        }
        let x = self.embed(table, &[prev])?;
        let x = g.input(x);
        self.step_from(g, enc, x, state)
    }

    fn step_from(&self, g: &mut Graph<F>, enc: &Encoded, x: Var, state: &[Var]) -> Result<StepOut> {
        let p = &self.params;
        let h1 = self.decoder[0].cell(g, p, x, state[0])?;
        let h2 = self.decoder[1].cell(g, p, h1, state[1])?;
        let q = self.att_query.forward(g, p, h2)?;
        let pre = g.add_row(enc.keys, q)?;
        let act = g.tanh(pre);
        let v = g.param(p, self.att_v);
        let e = g.matmul_t(act, v)?;
        let e = g.reshape(e, &[1, enc.len])?;
        let attention = g.softmax(e);
        let ctx = g.matmul(attention, enc.states)?;
        let hc = g.concat_cols(&[h2, ctx])?;
        let c = self.combine.forward(g, p, hc)?;
        let c = g.tanh(c);
        let logits = self.out.forward(g, p, c)?;
        Ok(StepOut {
            log_probs: g.log_softmax(logits),
            attention,
            state: vec![h1, h2],
        })
    }

    /// Teacher-forced negative log-likelihood of `tgt` (which should end in
    /// EOS) summed over tokens, as a graph scalar.
    pub fn nll_sum_var(
        &self,
        g: &mut Graph<F>,
        table: &EmbeddingTable,
        src: &[TokenId],
        tgt: &[TokenId],
    ) -> Result<Var> {
        let lp = self.log_prob_var(g, table, src, tgt)?;
        Ok(g.neg(lp))
    }

    /// `sum_t log p(tgt_t | tgt_<t, src)` under teacher forcing.
    pub fn log_prob_var(
        &self,
        g: &mut Graph<F>,
        table: &EmbeddingTable,
        src: &[TokenId],
        tgt: &[TokenId],
    ) -> Result<Var> {
        if tgt.is_empty() {
            return Err(Error::Empty("target"));
        }
        if let Some(&bad) = tgt.iter().find(|&&t| t as usize >= self.spec.vocab) {
            return Err(Error::InvalidArgument(format!("target token {bad} outside vocabulary")));
        }
        let enc = self.encode_source(g, table, src)?;
        let mut inputs = Vec::with_capacity(tgt.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&tgt[..tgt.len() - 1]);
        let xs = self.embed(table, &inputs)?;
        let xs = g.input(xs);
        let mut state = enc.init.clone();
        let mut picked = Vec::with_capacity(tgt.len());
        for (t, &y) in tgt.iter().enumerate() {
            let x = g.row(xs, t)?;
            let out = self.step_from(g, &enc, x, &state)?;
            picked.push(g.pick(out.log_probs, &[y as usize])?);
            state = out.state;
        }
        let all = g.concat_cols(&picked)?;
        Ok(g.sum(all))
    }

    /// Mean per-token NLL of `target` given `source`, EOS included.
    pub fn sequence_nll(&self, table: &EmbeddingTable, source: &TextChunk, target: &TextChunk) -> Result<f64> {
        let tgt = target_ids(target);
        let mut g = Graph::new();
        let v = self.nll_sum_var(&mut g, table, &source_ids(source), &tgt)?;
        Ok(g.scalar(v).as_f64() / tgt.len() as f64)
    }

    pub fn header(&self, vocab_hash: &str) -> Result<Header> {
        Ok(Header::new(
            KIND,
            F::DTYPE,
            self.spec.dim,
            vocab_hash,
            serde_json::to_value(&self.spec)?,
        ))
    }

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        checkpoint::save(path, &self.header(vocab_hash)?, &self.params)
    }

    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        let (header, tensors) = checkpoint::load::<F>(path)?;
        header.check_kind(KIND)?;
        header.check_vocab(vocab_hash)?;
        let spec: GeneratorSpec = serde_json::from_value(header.spec)
            .map_err(|e| Error::Checkpoint(format!("bad generator spec: {e}")))?;
        let mut g = Generator::new(spec, 0)?;
        g.params.load_named(tensors)?;
        Ok(g)
    }
}
