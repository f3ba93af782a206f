//! Dual-encoder discriminators scoring paragraph coherence (sentence-level
//! bag-of-words inputs) and sentence-pair cohesion (raw word sequences).

mod encoder;
mod loss;
mod negatives;
mod recall;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Header};
use crate::corpus::{bow_embed, EmbeddingTable, Sentence, SentencePair, TextChunk};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mode;
use crate::params::Params;
use crate::tensor::{Real, Tensor};

pub(crate) use encoder::Encoder;
pub use encoder::{EncoderKind, EncoderSpec, COHERENCE_WIDTHS, COHESION_WIDTHS};
pub use loss::{ranking_loss, ranking_loss_var, weighted_avg};
pub use negatives::{
    derangement, make_negatives_coherence, make_negatives_cohesion, word_shuffle, NegMethod,
    Negative, NegativeSet, Target,
};
pub use recall::{recall_at_k, recall_at_ks, RecallConfig, RetrievalTask};
pub use train::{train_discriminator, train_discriminator_with, DiscTrainConfig, DiscTrainer, EpochStats, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscKind {
    Coherence,
    Cohesion,
}

impl DiscKind {
    pub fn name(self) -> &'static str {
        match self {
            DiscKind::Coherence => "coherence",
            DiscKind::Cohesion => "cohesion",
        }
    }

    pub fn default_widths(self) -> &'static [usize] {
        match self {
            DiscKind::Coherence => &COHERENCE_WIDTHS,
            DiscKind::Cohesion => &COHESION_WIDTHS,
        }
    }
}

impl std::str::FromStr for DiscKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coherence" => Ok(DiscKind::Coherence),
            "cohesion" => Ok(DiscKind::Cohesion),
            _ => Err(Error::InvalidArgument(format!("unknown discriminator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Sentence-level BOW vectors of a chunk, one per sentence.
pub fn encode_coherence_input(chunk: &TextChunk, table: &EmbeddingTable) -> Result<Vec<Vec<f32>>> {
    if chunk.is_empty() {
        return Err(Error::Empty("text chunk"));
    }
    chunk.sentences.iter().map(|s| bow_embed(s, table)).collect()
}

/// `[sentences, d]` input for the coherence encoders.
pub fn coherence_tensor<F: Real>(chunk: &TextChunk, table: &EmbeddingTable) -> Result<Tensor<F>> {
    let rows = encode_coherence_input(chunk, table)?;
    let n = rows.len();
    let data = rows.into_iter().flatten().map(|x| F::lit(x as f64)).collect();
    Tensor::new(vec![n, table.dim()], data)
}

/// `[words, d]` input for the cohesion encoders.
pub fn cohesion_tensor<F: Real>(sentence: &Sentence, table: &EmbeddingTable) -> Result<Tensor<F>> {
    if sentence.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    Ok(table.lookup(&sentence.tokens)?.cast())
}

/// Consecutive pairs of `[S; T]`, including the junction.
pub fn decompose_pairs(source: &TextChunk, target: &TextChunk) -> Result<Vec<SentencePair>> {
    let all: Vec<&Sentence> = source.sentences.iter().chain(&target.sentences).collect();
    if all.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 sentences to form a pair, got {}",
            all.len()
        )));
    }
    Ok(all
        .windows(2)
        .map(|w| SentencePair {
            first: w[0].clone(),
            second: w[1].clone(),
        })
        .collect())
}

/// Two independently parameterized encoders compared by cosine.
#[derive(Debug, Clone)]
pub struct DualEncoder<F> {
    pub kind: DiscKind,
    pub spec: EncoderSpec,
    pub dim: usize,
    pub params: Params<F>,
    source: Encoder,
    target: Encoder,
}

#[derive(Serialize, Deserialize)]
struct SavedSpec {
    disc: DiscKind,
    encoder: EncoderSpec,
}

const EVAL_CHUNK: usize = 64;

impl<F: Real> DualEncoder<F> {
    pub fn new(kind: DiscKind, spec: EncoderSpec, dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let source = Encoder::new(&mut params, "source", dim, &spec, &mut rng);
        let target = Encoder::new(&mut params, "target", dim, &spec, &mut rng);
        Ok(DualEncoder {
            kind,
            spec,
            dim,
            params,
            source,
            target,
        })
    }

    fn encoder(&self, side: Side) -> &Encoder {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    /// Build encoder output rows for `inputs` inside `g`.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        side: Side,
        inputs: &[Tensor<F>],
        mode: Mode,
    ) -> Result<(Var, Option<crate::graph::BatchStats<F>>)> {
        self.encoder(side).forward(g, &self.params, inputs, mode)
    }

    pub(crate) fn update_running(&mut self, side: Side, stats: &crate::graph::BatchStats<F>) {
        let enc = match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        };
        enc.update_running(&mut self.params, stats);
    }

    /// Eval-mode encodings, one row per input.
    pub fn embed(&self, side: Side, inputs: &[Tensor<F>]) -> Result<Vec<Vec<F>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let (v, _) = self.encode(&mut g, side, chunk, Mode::Eval)?;
            let t = g.value(v);
            for r in 0..t.rows() {
                out.push(t.row_slice(r).to_vec());
            }
        }
        Ok(out)
    }

    /// Cosine of one source against each target, all in eval mode.
    pub fn score_many(&self, source: &Tensor<F>, targets: &[Tensor<F>]) -> Result<Vec<f64>> {
        let s = self.embed(Side::Source, std::slice::from_ref(source))?;
        let t = self.embed(Side::Target, targets)?;
        t.iter()
            .map(|row| crate::nn::cosine(&s[0], row).map(Real::as_f64))
            .collect()
    }

    pub fn score(&self, source: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
        Ok(self.score_many(source, std::slice::from_ref(target))?[0])
    }

    pub fn header(&self, vocab_hash: &str) -> Result<Header> {
        let spec = serde_json::to_value(SavedSpec {
            disc: self.kind,
            encoder: self.spec.clone(),
        })?;
        Ok(Header::new(self.kind.name(), F::DTYPE, self.dim, vocab_hash, spec))
    }

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        checkpoint::save(path, &self.header(vocab_hash)?, &self.params)
    }

    /// Load a checkpoint, refusing one built against another vocabulary.
    pub fn load(path: &Path, vocab_hash: &str) -> Result<Self> {
        let (header, tensors) = checkpoint::load::<F>(path)?;
        header.check_vocab(vocab_hash)?;
        let saved: SavedSpec = serde_json::from_value(header.spec.clone())
            .map_err(|e| Error::Checkpoint(format!("bad discriminator spec: {e}")))?;
        header.check_kind(saved.disc.name())?;
        let mut model = DualEncoder::new(saved.disc, saved.encoder, header.d, 0)?;
        model.params.load_named(tensors)?;
        Ok(model)
    }
}

/// Coherence score `cos(f(BOW(S)), g(BOW(T)))` in eval mode.
pub fn coherence_score(
    model: &DualEncoder<f32>,
    source: &TextChunk,
    target: &TextChunk,
    table: &EmbeddingTable,
) -> Result<f64> {
    expect_kind(model, DiscKind::Coherence)?;
    model.score(&coherence_tensor(source, table)?, &coherence_tensor(target, table)?)
}

/// Cohesion score of two consecutive sentences in eval mode.
pub fn cohesion_score(
    model: &DualEncoder<f32>,
    first: &Sentence,
    second: &Sentence,
    table: &EmbeddingTable,
) -> Result<f64> {
    expect_kind(model, DiscKind::Cohesion)?;
    model.score(&cohesion_tensor(first, table)?, &cohesion_tensor(second, table)?)
}

pub(crate) fn expect_kind<F>(model: &DualEncoder<F>, kind: DiscKind) -> Result<()> {
    if model.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected a {} discriminator, got {}",
            kind.name(),
            model.kind.name()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;

    fn table() -> (Vocab, EmbeddingTable) {
        let v = Vocab::from_tokens(&["a", "b", "c", "d", "e", "f"]).unwrap();
        let data: Vec<f32> = (0..v.len() * 4).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        (v, EmbeddingTable::from_rows(4, data).unwrap())
    }

    fn chunk(v: &Vocab, s: &[&str]) -> TextChunk {
        TextChunk::new(
            s.iter()
                .map(|x| Sentence::from_words(&x.split(' ').collect::<Vec<_>>(), v))
                .collect(),
        )
    }

    #[test]
    fn coherence_input_shapes_and_invariances() {
        let (v, t) = table();
        let c = chunk(&v, &["a b c", "d e", "f a", "b b", "c d e f"]);
        let x = encode_coherence_input(&c, &t).unwrap();
        assert_eq!(x.len(), 5);
        let words = chunk(&v, &["c a b", "e d", "a f", "b b", "f e d c"]);
        assert_eq!(encode_coherence_input(&words, &t).unwrap(), x);
        let perm = [2, 0, 4, 1, 3];
        let y = encode_coherence_input(&c.permuted(&perm), &t).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(y[i], x[p]);
        }
    }

    #[test]
    fn pairs_chain_through_the_junction() {
        let (v, _) = table();
        let s = chunk(&v, &["a", "b", "c", "d", "e"]);
        let t = chunk(&v, &["f", "a b", "b c", "c d", "d e"]);
        let p = decompose_pairs(&s, &t).unwrap();
        assert_eq!(p.len(), 9);
        assert_eq!(p[4].first, s.sentences[4]);
        assert_eq!(p[4].second, t.sentences[0]);
        for w in p.windows(2) {
            assert_eq!(w[0].second, w[1].first);
        }
        let one = decompose_pairs(&chunk(&v, &["a"]), &chunk(&v, &["b"])).unwrap();
        assert_eq!(one.len(), 1);
        assert!(decompose_pairs(&chunk(&v, &["a"]), &TextChunk::new(vec![])).is_err());
    }

    #[test]
    fn scores_are_bounded_and_deterministic() {
        let (v, t) = table();
        for spec in [
            EncoderSpec::conv(&COHERENCE_WIDTHS, 6, 5),
            EncoderSpec::recurrent(4, 5),
        ] {
            let m = DualEncoder::<f32>::new(DiscKind::Coherence, spec.clone(), 4, 9).unwrap();
            let m2 = DualEncoder::<f32>::new(DiscKind::Coherence, spec, 4, 9).unwrap();
            let s = chunk(&v, &["a b c", "d e", "f a", "b b", "c d e f"]);
            let tt = chunk(&v, &["f", "a b", "b c", "c d", "d e"]);
            let x = coherence_score(&m, &s, &tt, &t).unwrap();
            assert!((-1.0..=1.0).contains(&x));
            assert_eq!(x.to_bits(), coherence_score(&m2, &s, &tt, &t).unwrap().to_bits());
        }
    }

    #[test]
    fn encoders_do_not_share_storage() {
        let m = DualEncoder::<f32>::new(DiscKind::Cohesion, EncoderSpec::recurrent(3, 4), 4, 1).unwrap();
        let names: Vec<&str> = m.params.named_tensors().map(|(n, _)| n).collect();
        let src: Vec<_> = names.iter().filter(|n| n.starts_with("source.")).collect();
        let tgt: Vec<_> = names.iter().filter(|n| n.starts_with("target.")).collect();
        assert_eq!(src.len(), tgt.len());
        assert_eq!(src.len() + tgt.len(), names.len());
        let mut m2 = m.clone();
        let id = m2.params.find("source.fc.weight").unwrap();
        m2.params.get_mut(id).data_mut()[0] += 1.0;
        let tid = m2.params.find("target.fc.weight").unwrap();
        assert_eq!(m2.params.get(tid), m.params.get(tid));
    }

    #[test]
    fn checkpoint_roundtrip_and_vocab_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("coh.ckpt");
        let m = DualEncoder::<f32>::new(DiscKind::Cohesion, EncoderSpec::conv(&COHESION_WIDTHS, 3, 4), 4, 5).unwrap();
        m.save(&p, "h1").unwrap();
        let back = DualEncoder::<f32>::load(&p, "h1").unwrap();
        assert_eq!(back.params.fingerprint(), m.params.fingerprint());
        assert_eq!(back.spec, m.spec);
        assert!(matches!(DualEncoder::<f32>::load(&p, "h2"), Err(Error::Checkpoint(_))));
    }
}
