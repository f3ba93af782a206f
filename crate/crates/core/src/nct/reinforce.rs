use crate::corpus::{EmbeddingTable, TokenId};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::graph::{Graph, Var};
use crate::params::{Gradients, Params};
use crate::tensor::Real;

/// A stochastic policy whose action log-probabilities can be rebuilt in a
/// graph for differentiation.
pub trait SequencePolicy<F: Real> {
    type Action;

    fn params(&self) -> &Params<F>;

    /// `log pi(action)` as a scalar graph node (summed over steps).
    fn log_prob(&self, g: &mut Graph<F>, action: &Self::Action) -> Result<Var>;
}

/// One sampled continuation for a given source.
#[derive(Debug, Clone, PartialEq)]
pub struct GenAction {
    pub source: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
}

pub struct GeneratorPolicy<'a, F> {
    pub generator: &'a Generator<F>,
    pub table: &'a EmbeddingTable,
}

impl<F: Real> SequencePolicy<F> for GeneratorPolicy<'_, F> {
    type Action = GenAction;

    fn params(&self) -> &Params<F> {
        &self.generator.params
    }

    fn log_prob(&self, g: &mut Graph<F>, a: &GenAction) -> Result<Var> {
        self.generator.log_prob_var(g, self.table, &a.source, &a.tokens)
    }
}

/// Gradient of `-(1/N) sum_i R_i log pi(a_i)` with the terminal reward as
/// the return of every step. Episodes with zero reward are skipped; if all
/// are zero the result is `None`.
pub fn reinforce_gradients<F: Real, P: SequencePolicy<F>>(
    policy: &P,
    episodes: &[(P::Action, f64)],
) -> Result<Option<Gradients<F>>> {
    if episodes.is_empty() {
        return Err(Error::Empty("episode batch"));
    }
    if let Some((_, r)) = episodes.iter().find(|(_, r)| !r.is_finite()) {
        return Err(Error::Divergence(format!("reward {r}")));
    }
    let n = episodes.len() as f64;
    let mut g = Graph::new();
    let mut terms = Vec::new();
    for (a, r) in episodes {
        if *r == 0.0 {
            continue;
        }
        let lp = policy.log_prob(&mut g, a)?;
        terms.push(g.scale(lp, F::lit(-r / n)));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let all = g.concat_cols(&terms)?;
    let loss = g.sum(all);
    let grads = g.backward(loss).map_err(|e| match e {
        Error::NonFinite(d) => Error::Divergence(d),
        other => other,
    })?;
    Ok(Some(grads))
}
