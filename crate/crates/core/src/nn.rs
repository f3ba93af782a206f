//! Neural building blocks on top of [`Graph`]: linear layers, GRUs,
//! convolution banks with max-over-time pooling, batch norm and cosine.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::params::{ParamId, Params};
use crate::tensor::{dot, Real, Tensor};

static ZERO_NORM_COSINES: AtomicUsize = AtomicUsize::new(0);

/// Process-wide count of cosine evaluations that hit a zero-norm vector
/// outside of a graph.
pub fn zero_norm_cosines() -> usize {
    ZERO_NORM_COSINES.load(Ordering::Relaxed)
}

/// Cosine similarity clamped to `[-1, 1]`; a zero-norm input scores 0.
pub fn cosine<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == F::zero() || nb == F::zero() {
        ZERO_NORM_COSINES.fetch_add(1, Ordering::Relaxed);
        return Ok(F::zero());
    }
    Ok((dot(a, b) / (na * nb)).max(-F::one()).min(F::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        params: &mut Params<F>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = params.add_uniform(format!("{name}.weight"), &[output, input], bound, rng);
        let b = params.add_uniform(format!("{name}.bias"), &[1, output], bound, rng);
        Linear { w, b }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Params<F>, x: Var) -> Result<Var> {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        g.linear(x, w, b)
    }
}

/// Gated recurrent unit parameters. Gate order in the stacked matrices is
/// reset, update, candidate.
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_x: ParamId,
    pub b_x: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<F: Real>(
        params: &mut Params<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Gru {
            w_x: params.add_uniform(format!("{name}.w_x"), &[3 * hidden, input], bound, rng),
            b_x: params.add_uniform(format!("{name}.b_x"), &[1, 3 * hidden], bound, rng),
            w_h: params.add_uniform(format!("{name}.w_h"), &[3 * hidden, hidden], bound, rng),
            b_h: params.add_uniform(format!("{name}.b_h"), &[1, 3 * hidden], bound, rng),
            input,
            hidden,
        }
    }

    /// One step: `x[1, input]`, `h[1, hidden]` to the next state.
    pub fn cell<F: Real>(&self, g: &mut Graph<F>, p: &Params<F>, x: Var, h: Var) -> Result<Var> {
        if g.value(x).len() != self.input || g.value(h).len() != self.hidden {
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "x {:?} / h {:?} for input {} hidden {}",
                    g.shape(x),
                    g.shape(h),
                    self.input,
                    self.hidden
                ),
            ));
        }
        let (wx, bx) = (g.param(p, self.w_x), g.param(p, self.b_x));
        let gx = g.linear(x, wx, bx)?;
        self.step(g, p, gx, h)
    }

    fn step<F: Real>(&self, g: &mut Graph<F>, p: &Params<F>, gx: Var, h: Var) -> Result<Var> {
        let (wh, bh) = (g.param(p, self.w_h), g.param(p, self.b_h));
        g.gru_cell(gx, h, wh, bh)
    }

    /// Run over `xs[L, input]`. States are returned in input order, so for
    /// `reverse` the first element is the state after consuming the whole
    /// sequence backwards.
    pub fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        xs: Var,
        h0: Var,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        if g.value(xs).cols() != self.input {
            return Err(Error::shape("gru_run", format!("{:?}", g.shape(xs))));
        }
        let len = g.value(xs).rows();
        let (wx, bx) = (g.param(p, self.w_x), g.param(p, self.b_x));
        let gxs = g.linear(xs, wx, bx)?;
        let mut states = vec![h0; len];
        let mut h = h0;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        };
        for t in order {
            let gx = g.row(gxs, t)?;
            h = self.step(g, p, gx, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}

/// A bank of 1-D convolutions (one per width) with tanh and max-over-time.
#[derive(Debug, Clone)]
pub struct ConvBank {
    pub widths: Vec<usize>,
    pub filters: usize,
    banks: Vec<(ParamId, ParamId)>,
}

impl ConvBank {
    pub fn new<F: Real>(
        params: &mut Params<F>,
        name: &str,
        input: usize,
        widths: &[usize],
        filters: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let banks = widths
            .iter()
            .map(|&w| {
                let bound = 1.0 / ((w * input) as f64).sqrt();
                (
                    params.add_uniform(format!("{name}.w{w}.weight"), &[filters, w * input], bound, rng),
                    params.add_uniform(format!("{name}.w{w}.bias"), &[1, filters], bound, rng),
                )
            })
            .collect();
        ConvBank {
            widths: widths.to_vec(),
            filters,
            banks,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.widths.len() * self.filters
    }

    /// Pooled features `[1, widths * filters]` for a `[L, d]` sequence.
    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Params<F>, seq: Var) -> Result<Var> {
        if g.value(seq).is_empty() {
            return Err(Error::Empty("conv input sequence"));
        }
        let mut outs = Vec::with_capacity(self.banks.len());
        for (&width, &(w, b)) in self.widths.iter().zip(&self.banks) {
            let (wv, bv) = (g.param(p, w), g.param(p, b));
            outs.push(g.conv_maxpool(seq, wv, bv, width)?);
        }
        g.concat_cols(&outs)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<F: Real>(params: &mut Params<F>, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[1, dim], F::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
            running_mean: params.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[1, dim])),
            running_var: params.add_buffer(format!("{name}.running_var"), Tensor::full(&[1, dim], F::one())),
            momentum: 0.1,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let (gamma, beta) = (g.param(p, self.gamma), g.param(p, self.beta));
        match mode {
            Mode::Train => g.batch_norm(x, gamma, beta, None),
            Mode::Eval => g.batch_norm(
                x,
                gamma,
                beta,
                Some((p.get(self.running_mean).data(), p.get(self.running_var).data())),
            ),
        }
    }

    /// Exponential moving update of the running estimates; the variance
    /// estimate uses the unbiased batch variance.
    pub fn update_running<F: Real>(&self, p: &mut Params<F>, stats: &BatchStats<F>) {
        let mom = F::lit(self.momentum);
        let keep = F::one() - mom;
        let n = stats.n as f64;
        let unbias = if stats.n > 1 { F::lit(n / (n - 1.0)) } else { F::one() };
        for (rm, &m) in p.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *rm = keep * *rm + mom * m;
        }
        for (rv, &v) in p.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *rv = keep * *rv + mom * v * unbias;
        }
    }
}
