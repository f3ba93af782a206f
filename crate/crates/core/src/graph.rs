//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted and `backward` is a single reverse sweep.
//! Parameter leaves are cached per graph: using a parameter in many places
//! yields one leaf whose gradient accumulates across all uses.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, Params};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Clamp(Var, F, F),
    NormalizeRows {
        x: Var,
        norms: Vec<F>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: Vec<F>,
        nb: Vec<F>,
    },
    ConvMaxPool {
        x: Var,
        w: Var,
        b: Var,
        width: usize,
        pad: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    GruCell {
        gx: Var,
        h: Var,
        w: Var,
        b: Var,
        gates: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<F>,
    pub n: usize,
}

#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_leaves: HashMap<ParamId, Var>,
    zero_norm_events: usize,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

pub const BN_EPS: f64 = 1e-5;

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            zero_norm_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of zero-norm vectors seen by cosine / normalization nodes.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, params: &Params<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let trainable = params.is_trainable(id);
        let v = self.push(params.get(id).clone(), Op::Param(id), trainable);
        self.param_leaves.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    /// `a[n,m] + b[1,m]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if self.value(b).len() != m {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b).data();
        for r in 0..n {
            for (o, &x) in out.data_mut()[r * m..(r + 1) * m].iter_mut().zip(bv) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// `a[n,k] · b[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, m) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![F::zero(); n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), ng))
    }

    /// `a[n,k] · w[m,k]ᵀ`, the linear-layer convention.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (n, k) = (self.value(a).rows(), self.value(a).cols());
        let (m, k2) = (self.value(w).rows(), self.value(w).cols());
        if k != k2 {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(w)),
            ));
        }
        let mut out = vec![F::zero(); n * m];
        gemm_nt(self.value(a).data(), self.value(w).data(), &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulT(a, w), ng))
    }

    /// `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        self.add_row(y, b)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(F::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / F::lit(t.len() as f64));
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let n = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let m = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != m) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let n = out.len() / m;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if start + len > m || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {m}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        if start + len > n || len == 0 {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {}) of {n}", start + len),
            ));
        }
        let out = t.data()[start * m..(start + len) * m].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![len, m], out)?, Op::SliceRows(a, start), ng))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, 1)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut out = t.clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * m..(r + 1) * m];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut out = t.clone();
        for r in 0..n {
            let row = &mut out.data_mut()[r * m..(r + 1) * m];
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Gather elements by flat index into a `[1, k]` row.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if flat.is_empty() {
            return Err(Error::Empty("pick"));
        }
        if let Some(&bad) = flat.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape("pick", format!("index {bad} of {}", t.len())));
        }
        let out: Vec<F> = flat.iter().map(|&i| t.data()[i]).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::row(out), Op::Pick(a, flat.to_vec()), ng))
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Scale each row to unit L2 norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(n);
        let mut zero = 0;
        for r in 0..n {
            let row = &mut out.data_mut()[r * m..(r + 1) * m];
            let nr = dot(row, row).sqrt();
            if nr > F::zero() {
                for x in row.iter_mut() {
                    *x /= nr;
                }
            } else {
                zero += 1;
            }
            norms.push(nr);
        }
        self.zero_norm_events += zero;
        let ng = self.ng(a);
        self.push(out, Op::NormalizeRows { x: a, norms }, ng)
    }

    /// Row-wise cosine similarity of `a[n,d]` and `b[n,d]`, shape `[n, 1]`.
    /// A zero-norm row scores 0 and passes no gradient.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let (n, m) = (at.rows(), at.cols());
        let mut out = Vec::with_capacity(n);
        let mut na = Vec::with_capacity(n);
        let mut nb = Vec::with_capacity(n);
        let mut zero = 0;
        for r in 0..n {
            let (x, y) = (&at.data()[r * m..(r + 1) * m], &bt.data()[r * m..(r + 1) * m]);
            let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
            if nx > F::zero() && ny > F::zero() {
                let c = dot(x, y) / (nx * ny);
                out.push(c.max(-F::one()).min(F::one()));
            } else {
                zero += 1;
                out.push(F::zero());
            }
            na.push(nx);
            nb.push(ny);
        }
        self.zero_norm_events += zero;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![n, 1], out)?,
            Op::Cosine { a, b, na, nb },
            ng,
        ))
    }

    /// One convolution bank over a `[L, d]` sequence followed by tanh and
    /// max-over-time. `w` is `[filters, width*d]`, `b` is `[1, filters]`.
    /// Sequences shorter than `width` are left-padded with zero rows.
    pub fn conv_maxpool(&mut self, x: Var, w: Var, b: Var, width: usize) -> Result<Var> {
        let xt = self.value(x);
        let (len, d) = (xt.rows(), xt.cols());
        let (nf, wd) = (self.value(w).rows(), self.value(w).cols());
        if width == 0 || wd != width * d || self.value(b).len() != nf {
            return Err(Error::shape(
                "conv_maxpool",
                format!(
                    "x {:?}, w {:?}, b {:?}, width {width}",
                    xt.shape(),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let pad = width.saturating_sub(len);
        let padded;
        let xs: &[F] = if pad > 0 {
            let mut p = vec![F::zero(); pad * d];
            p.extend_from_slice(xt.data());
            padded = p;
            &padded
        } else {
            xt.data()
        };
        let positions = len + pad - width + 1;
        let (wv, bv) = (self.value(w).data(), self.value(b).data());
        let mut best = vec![F::neg_infinity(); nf];
        let mut argmax = vec![0usize; nf];
        for p in 0..positions {
            let window = &xs[p * d..(p + width) * d];
            for f in 0..nf {
                let y = (dot(window, &wv[f * wd..(f + 1) * wd]) + bv[f]).tanh();
                if y > best[f] {
                    best[f] = y;
                    argmax[f] = p;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::row(best),
            Op::ConvMaxPool {
                x,
                w,
                b,
                width,
                pad,
                argmax,
            },
            ng,
        ))
    }

    /// Batch normalization over rows of `x[n, m]`. In train mode the batch
    /// statistics are returned so the caller can update running estimates;
    /// in eval mode `running` supplies (mean, var).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let xt = self.value(x);
        let (n, m) = (xt.rows(), xt.cols());
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::shape("batch_norm", "gamma/beta width"));
        }
        let eps = F::lit(BN_EPS);
        let (mean, var, train) = match running {
            None => {
                let nf = F::lit(n as f64);
                let mut mean = vec![F::zero(); m];
                for r in 0..n {
                    for (mu, &v) in mean.iter_mut().zip(xt.row_slice(r)) {
                        *mu += v;
                    }
                }
                mean.iter_mut().for_each(|mu| *mu /= nf);
                let mut var = vec![F::zero(); m];
                for r in 0..n {
                    for ((s, &v), &mu) in var.iter_mut().zip(xt.row_slice(r)).zip(&mean) {
                        *s += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|s| *s /= nf);
                (mean, var, true)
            }
            Some((rm, rv)) => {
                if rm.len() != m || rv.len() != m {
                    return Err(Error::shape("batch_norm", "running stats width"));
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); n * m];
        let mut out = vec![F::zero(); n * m];
        for r in 0..n {
            for j in 0..m {
                let i = r * m + j;
                xhat[i] = (xt.data()[i] - mean[j]) * inv_std[j];
                out[i] = g[j] * xhat[i] + bt[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            Tensor::new(vec![n, m], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        );
        let stats = train.then_some(BatchStats { mean, var, n });
        Ok((v, stats))
    }

    /// Fused GRU update from precomputed input projections `gx = x·W_xᵀ + b_x`
    /// (`[1, 3h]`, gate order r, z, n) and hidden projection weights
    /// `w[3h, h]`, `b[1, 3h]`:
    ///
    /// ```text
    /// r = σ(gx_r + gh_r)   z = σ(gx_z + gh_z)
    /// n = tanh(gx_n + r ∘ gh_n)
    /// h' = (1 − z) ∘ h + z ∘ n
    /// ```
    pub fn gru_cell(&mut self, gx: Var, h: Var, w: Var, b: Var) -> Result<Var> {
        let hd = self.value(h).len();
        if self.value(gx).len() != 3 * hd
            || self.shape(w) != [3 * hd, hd]
            || self.value(b).len() != 3 * hd
        {
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "gx {:?}, h {:?}, w {:?}, b {:?}",
                    self.shape(gx),
                    self.shape(h),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let hv = self.value(h).data();
        let gxv = self.value(gx).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut gh = bv.to_vec();
        for (j, o) in gh.iter_mut().enumerate() {
            *o += dot(&wv[j * hd..(j + 1) * hd], hv);
        }
        // gates layout: r | z | n | gh_n
        let mut gates = vec![F::zero(); 4 * hd];
        let mut out = vec![F::zero(); hd];
        for k in 0..hd {
            let r = sigmoid(gxv[k] + gh[k]);
            let z = sigmoid(gxv[hd + k] + gh[hd + k]);
            let ghn = gh[2 * hd + k];
            let n = (gxv[2 * hd + k] + r * ghn).tanh();
            gates[k] = r;
            gates[hd + k] = z;
            gates[2 * hd + k] = n;
            gates[3 * hd + k] = ghn;
            out[k] = (F::one() - z) * hv[k] + z * n;
        }
        let ng = self.ng(gx) || self.ng(h) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::row(out),
            Op::GruCell { gx, h, w, b, gates },
            ng,
        ))
    }

    /// Reverse sweep from a scalar root; returns gradients for every
    /// trainable parameter leaf reached.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(rv.shape(), F::one()));
        let mut out = Gradients::empty(0);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            self.propagate(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        out: &mut Gradients<F>,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<F>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<F>| {
            Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape")
        };
        let gd = g.data();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    acc(*a, like(*a, gd.iter().zip(bv).map(|(&x, &y)| x * y).collect()));
                }
                if self.ng(*b) {
                    acc(*b, like(*b, gd.iter().zip(av).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    let m = g.cols();
                    let mut db = vec![F::zero(); m];
                    for r in 0..g.rows() {
                        for (d, &x) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (n, k, m) = (at.rows(), at.cols(), bt.cols());
                if self.ng(*a) {
                    let mut da = vec![F::zero(); n * k];
                    gemm_nt(gd, bt.data(), &mut da, n, m, k);
                    acc(*a, like(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![F::zero(); k * m];
                    gemm_tn(at.data(), gd, &mut db, n, k, m);
                    acc(*b, like(*b, db));
                }
            }
            Op::MatMulT(a, w) => {
                let (at, wt) = (self.value(*a), self.value(*w));
                let (n, k, m) = (at.rows(), at.cols(), wt.rows());
                if self.ng(*a) {
                    let mut da = vec![F::zero(); n * k];
                    gemm_nn(gd, wt.data(), &mut da, n, m, k);
                    acc(*a, like(*a, da));
                }
                if self.ng(*w) {
                    let mut dw = vec![F::zero(); m * k];
                    gemm_tn(gd, at.data(), &mut dw, n, m, k);
                    acc(*w, like(*w, dw));
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    like(*a, gd.iter().zip(y).map(|(&g, &y)| g * (F::one() - y * y)).collect()),
                );
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    like(*a, gd.iter().zip(y).map(|(&g, &y)| g * y * (F::one() - y)).collect()),
                );
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                            .collect(),
                    ),
                );
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, like(*a, gd.iter().zip(y).map(|(&g, &y)| g * y).collect()));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, like(*a, gd.iter().zip(x).map(|(&g, &x)| g / x).collect()));
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let n = F::lit(self.value(*a).len() as f64);
                acc(*a, Tensor::full(self.shape(*a), gd[0] / n));
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let m = self.value(p).cols();
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * m);
                        for r in 0..n {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + m]);
                        }
                        acc(p, like(p, d));
                    }
                    offset += m;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        acc(p, like(p, gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let m = self.value(*a).cols();
                let len = g.cols();
                let mut d = vec![F::zero(); self.value(*a).len()];
                for r in 0..g.rows() {
                    d[r * m + start..r * m + start + len].copy_from_slice(g.row_slice(r));
                }
                acc(*a, like(*a, d));
            }
            Op::SliceRows(a, start) => {
                let m = self.value(*a).cols();
                let mut d = vec![F::zero(); self.value(*a).len()];
                d[start * m..start * m + gd.len()].copy_from_slice(gd);
                acc(*a, like(*a, d));
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Softmax(a) => {
                let y = &node.value;
                let m = y.cols();
                let mut d = vec![F::zero(); y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), &gd[r * m..(r + 1) * m]);
                    let s = dot(yr, gr);
                    for j in 0..m {
                        d[r * m + j] = yr[j] * (gr[j] - s);
                    }
                }
                acc(*a, like(*a, d));
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let m = y.cols();
                let mut d = vec![F::zero(); y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), &gd[r * m..(r + 1) * m]);
                    let s: F = gr.iter().copied().sum();
                    for j in 0..m {
                        d[r * m + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*a, like(*a, d));
            }
            Op::Pick(a, idx) => {
                let mut d = vec![F::zero(); self.value(*a).len()];
                for (&i, &x) in idx.iter().zip(gd) {
                    d[i] += x;
                }
                acc(*a, like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { F::zero() })
                            .collect(),
                    ),
                );
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let m = y.cols();
                let mut d = vec![F::zero(); y.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    if nr == F::zero() {
                        continue;
                    }
                    let (yr, gr) = (y.row_slice(r), &gd[r * m..(r + 1) * m]);
                    let s = dot(yr, gr);
                    for j in 0..m {
                        d[r * m + j] = (gr[j] - yr[j] * s) / nr;
                    }
                }
                acc(*x, like(*x, d));
            }
            Op::Cosine { a, b, na, nb } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let m = at.cols();
                let mut da = vec![F::zero(); at.len()];
                let mut db = vec![F::zero(); bt.len()];
                for r in 0..at.rows() {
                    let (nx, ny) = (na[r], nb[r]);
                    if nx == F::zero() || ny == F::zero() {
                        continue;
                    }
                    let c = node.value.data()[r];
                    let gr = gd[r];
                    let (x, y) = (at.row_slice(r), bt.row_slice(r));
                    for j in 0..m {
                        da[r * m + j] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        db[r * m + j] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::ConvMaxPool {
                x,
                w,
                b,
                width,
                pad,
                argmax,
            } => {
                let xt = self.value(*x);
                let d = xt.cols();
                let wd = width * d;
                let wv = self.value(*w).data();
                let mut xs = vec![F::zero(); pad * d];
                xs.extend_from_slice(xt.data());
                let mut dx = vec![F::zero(); xs.len()];
                let mut dw = vec![F::zero(); wv.len()];
                let mut db = vec![F::zero(); argmax.len()];
                let need_dx = self.ng(*x);
                for (f, &p) in argmax.iter().enumerate() {
                    let y = node.value.data()[f];
                    let dpre = gd[f] * (F::one() - y * y);
                    if dpre == F::zero() {
                        continue;
                    }
                    db[f] = dpre;
                    let window = &xs[p * d..p * d + wd];
                    let wf = &wv[f * wd..(f + 1) * wd];
                    for k in 0..wd {
                        dw[f * wd + k] += dpre * window[k];
                    }
                    if need_dx {
                        for k in 0..wd {
                            dx[p * d + k] += dpre * wf[k];
                        }
                    }
                }
                if need_dx {
                    acc(*x, like(*x, dx[pad * d..].to_vec()));
                }
                acc(*w, like(*w, dw));
                acc(*b, like(*b, db));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, m) = (node.value.rows(), node.value.cols());
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); m];
                let mut dbeta = vec![F::zero(); m];
                for r in 0..n {
                    for j in 0..m {
                        let i = r * m + j;
                        dgamma[j] += gd[i] * xhat[i];
                        dbeta[j] += gd[i];
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![F::zero(); n * m];
                    if *train {
                        let nf = F::lit(n as f64);
                        for r in 0..n {
                            for j in 0..m {
                                let i = r * m + j;
                                dx[i] = gam[j] * inv_std[j] / nf
                                    * (nf * gd[i] - dbeta[j] - xhat[i] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..m {
                                let i = r * m + j;
                                dx[i] = gd[i] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    acc(*x, like(*x, dx));
                }
                acc(*gamma, like(*gamma, dgamma));
                acc(*beta, like(*beta, dbeta));
            }
            Op::GruCell { gx, h, w, b, gates } => {
                let hd = gd.len();
                let hv = self.value(*h).data();
                let wv = self.value(*w).data();
                let mut dgx = vec![F::zero(); 3 * hd];
                let mut dgh = vec![F::zero(); 3 * hd];
                let mut dh = vec![F::zero(); hd];
                for k in 0..hd {
                    let (r, z, n, ghn) =
                        (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
                    let gk = gd[k];
                    let dz = gk * (n - hv[k]);
                    let dn = gk * z;
                    dh[k] = gk * (F::one() - z);
                    let dan = dn * (F::one() - n * n);
                    let dr = dan * ghn;
                    let dar = dr * r * (F::one() - r);
                    let daz = dz * z * (F::one() - z);
                    dgx[k] = dar;
                    dgx[hd + k] = daz;
                    dgx[2 * hd + k] = dan;
                    dgh[k] = dar;
                    dgh[hd + k] = daz;
                    dgh[2 * hd + k] = dan * r;
                }
                if self.ng(*h) {
                    // dh += dghᵀ · W
                    gemm_nn(&dgh, wv, &mut dh, 1, 3 * hd, hd);
                    acc(*h, like(*h, dh));
                }
                if self.ng(*w) {
                    let mut dw = vec![F::zero(); 3 * hd * hd];
                    gemm_tn(&dgh, hv, &mut dw, 1, 3 * hd, hd);
                    acc(*w, like(*w, dw));
                }
                acc(*b, like(*b, dgh));
                acc(*gx, like(*gx, dgx));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn log_sum_exp<F: Real>(xs: &[F]) -> F {
    let mx = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<F>().ln()
}
