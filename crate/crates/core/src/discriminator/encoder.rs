use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::nn::{BatchNorm, ConvBank, Gru, Linear, Mode};
use crate::params::Params;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Conv,
    Recurrent,
}

/// Encoder architecture. Both variants end in a fully connected layer,
/// batch norm and tanh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Conv {
        widths: Vec<usize>,
        filters: usize,
        out_dim: usize,
    },
    Recurrent {
        hidden: usize,
        out_dim: usize,
    },
}

pub const COHERENCE_WIDTHS: [usize; 4] = [2, 3, 4, 5];
pub const COHESION_WIDTHS: [usize; 4] = [3, 4, 5, 6];

impl EncoderSpec {
    pub fn conv(widths: &[usize], filters: usize, out_dim: usize) -> Self {
        EncoderSpec::Conv {
            widths: widths.to_vec(),
            filters,
            out_dim,
        }
    }

    pub fn recurrent(hidden: usize, out_dim: usize) -> Self {
        EncoderSpec::Recurrent { hidden, out_dim }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderSpec::Conv { .. } => EncoderKind::Conv,
            EncoderSpec::Recurrent { .. } => EncoderKind::Recurrent,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            EncoderSpec::Conv { out_dim, .. } | EncoderSpec::Recurrent { out_dim, .. } => *out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self {
            EncoderSpec::Conv {
                widths,
                filters,
                out_dim,
            } => widths.is_empty() || widths.contains(&0) || *filters == 0 || *out_dim == 0,
            EncoderSpec::Recurrent { hidden, out_dim } => *hidden == 0 || *out_dim == 0,
        };
        if bad {
            return Err(Error::InvalidArgument(format!("degenerate encoder spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body {
    Conv(ConvBank),
    Recurrent { fwd: Gru, bwd: Gru },
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    body: Body,
    fc: Linear,
    bn: BatchNorm,
}

impl Encoder {
    pub(crate) fn new<F: Real>(
        p: &mut Params<F>,
        name: &str,
        input: usize,
        spec: &EncoderSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let (body, feat) = match spec {
            EncoderSpec::Conv { widths, filters, .. } => {
                let bank = ConvBank::new(p, &format!("{name}.conv"), input, widths, *filters, rng);
                let d = bank.output_dim();
                (Body::Conv(bank), d)
            }
            EncoderSpec::Recurrent { hidden, .. } => (
                Body::Recurrent {
                    fwd: Gru::new(p, &format!("{name}.gru_fwd"), input, *hidden, rng),
                    bwd: Gru::new(p, &format!("{name}.gru_bwd"), input, *hidden, rng),
                },
                2 * hidden,
            ),
        };
        let fc = Linear::new(p, &format!("{name}.fc"), feat, spec.out_dim(), rng);
        let bn = BatchNorm::new(p, &format!("{name}.bn"), spec.out_dim());
        Encoder { body, fc, bn }
    }

    fn features<F: Real>(&self, g: &mut Graph<F>, p: &Params<F>, seq: Var) -> Result<Var> {
        match &self.body {
            Body::Conv(bank) => bank.forward(g, p, seq),
            Body::Recurrent { fwd, bwd } => {
                let h0 = g.input(Tensor::zeros(&[1, fwd.hidden]));
                let f = fwd.run(g, p, seq, h0, false)?;
                let b = bwd.run(g, p, seq, h0, true)?;
                g.concat_cols(&[*f.last().unwrap(), b[0]])
            }
        }
    }

    /// Encode a batch of `[len, d]` sequences into `[n, out_dim]`.
    pub(crate) fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        seqs: &[Tensor<F>],
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        if seqs.is_empty() {
            return Err(Error::Empty("encoder batch"));
        }
        let mut rows = Vec::with_capacity(seqs.len());
        for s in seqs {
            let x = g.input(s.clone());
            rows.push(self.features(g, p, x)?);
        }
        let h = g.concat_rows(&rows)?;
        let z = self.fc.forward(g, p, h)?;
        let (y, stats) = self.bn.forward(g, p, z, mode)?;
        Ok((g.tanh(y), stats))
    }

    pub(crate) fn update_running<F: Real>(&self, p: &mut Params<F>, stats: &BatchStats<F>) {
        self.bn.update_running(p, stats);
    }
}
