//! Adam with bias correction, and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, Params};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moments per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut Params<F>, grads: &Gradients<F>) {
        self.t += 1;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let c = self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = F::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (F::lit(c.lr), F::lit(c.eps));
        for (id, g) in grads.iter() {
            if id.index() >= params.len() || !params.is_trainable(id) {
                continue;
            }
            let shape = params.get(id).shape().to_vec();
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = params.get_mut(id).data_mut();
            for (((pi, &gi), mi), vi) in p
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> F {
    let norm = grads.global_norm();
    let max = F::lit(max_norm);
    if norm > max {
        grads.scale(max / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use proptest::prelude::*;

    fn single(values: Vec<f64>) -> (Params<f64>, Gradients<f64>, ParamId) {
        let mut p = Params::new();
        let id = p.add("x", Tensor::row(vec![0.0; values.len()]));
        let mut g = Gradients::empty(1);
        g.accumulate(id, &Tensor::row(values));
        (p, g, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut p, g, id) = single(vec![0.3, -2.0, 1e-3]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        adam.step(&mut p, &g);
        for (x, s) in p.get(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-6, "{x}");
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut p, g, id) = single(vec![0.0, 0.0]);
        p.get_mut(id).data_mut().copy_from_slice(&[1.5, -0.5]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..100 {
            adam.step(&mut p, &g);
        }
        assert_eq!(p.get(id).data(), &[1.5, -0.5]);
    }

    #[test]
    fn quadratic_bowl_decreases_monotonically() {
        let mut p = Params::new();
        let id = p.add("x", Tensor::scalar(3.0f64));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let mut prev = 3.0f64;
        for _ in 0..20 {
            let x = p.get(id).item();
            let mut g = Gradients::empty(1);
            g.accumulate(id, &Tensor::scalar(2.0 * x));
            adam.step(&mut p, &g);
            let now = p.get(id).item().abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let (mut p, g, id) = single(vec![0.25, -0.75, 3.0]);
            let mut adam = Adam::new(AdamConfig::with_lr(0.05));
            for _ in 0..5 {
                adam.step(&mut p, &g);
            }
            p.get(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn clip_examples() {
        let (_, mut g, id) = single(vec![0.3, 0.4]);
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.get(id).unwrap().data(), &[0.3, 0.4]);
        let (_, mut g, id) = single(vec![3.0, 4.0]);
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g.get(id).unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded_and_idempotent(
            a in proptest::collection::vec(-50.0f64..50.0, 1..20),
            b in proptest::collection::vec(-50.0f64..50.0, 1..20),
            max in 0.01f64..10.0,
        ) {
            let mut g = Gradients::empty(2);
            g.accumulate(ParamId(0), &Tensor::row(a));
            g.accumulate(ParamId(1), &Tensor::row(b));
            clip_global_norm(&mut g, max);
            prop_assert!(g.global_norm() <= max + 1e-9);
            let once: Vec<f64> = g.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            clip_global_norm(&mut g, max);
            let twice: Vec<f64> = g.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            for (x, y) in once.iter().zip(&twice) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}
