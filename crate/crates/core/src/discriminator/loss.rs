use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

/// Softmax-weighted average `sum_j w_j x_j` with `w = softmax(lambda x)`:
/// the mean at `lambda = 0`, tending to the max as `lambda` grows.
pub fn weighted_avg(scores: &[f64], lambda: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("score list"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for &x in scores {
        let w = (lambda * (x - m)).exp();
        num += w * (x - m);
        den += w;
    }
    Ok(m + num / den)
}

/// `max(0, delta - positive + AVG^lambda(negatives))`.
pub fn ranking_loss(positive: f64, negatives: &[f64], delta: f64, lambda: f64) -> Result<f64> {
    Ok((delta - (positive - weighted_avg(negatives, lambda)?)).max(0.0))
}

/// Graph form of [`ranking_loss`]; `negatives` is a `[1, k]` row.
pub fn ranking_loss_var<F: Real>(
    g: &mut Graph<F>,
    positive: Var,
    negatives: Var,
    delta: f64,
    lambda: f64,
) -> Result<Var> {
    if g.value(positive).len() != 1 {
        return Err(Error::shape("ranking_loss", format!("positive {:?}", g.shape(positive))));
    }
    // centring on the max keeps equal scores exact; the shift carries no gradient
    let top = g
        .value(negatives)
        .data()
        .iter()
        .copied()
        .fold(F::neg_infinity(), F::max);
    let scaled = g.scale(negatives, F::lit(lambda));
    let w = g.softmax(scaled);
    let centred = g.add_scalar(negatives, -top);
    let weighted = g.mul(w, centred)?;
    let excess = g.sum(weighted);
    let pos = g.reshape(positive, &[1])?;
    let gap = g.add_scalar(pos, -top);
    let margin = g.sub(gap, excess)?;
    let neg_margin = g.neg(margin);
    let shifted = g.add_scalar(neg_margin, F::lit(delta));
    Ok(g.relu(shifted))
}
