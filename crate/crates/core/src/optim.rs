//! SGD and Adam.

use std::collections::HashMap;

use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments<S: Scalar> {
    pub first: Tensor<S>,
    pub second: Tensor<S>,
    pub steps: u32,
}

/// Optimizer with per-parameter Adam moments.
///
/// Only parameters that received a gradient since the last step are updated, and
/// each keeps its own step counter for bias correction. A parameter that no
/// loss reached therefore stays bit-identical, as do frozen parameters.
#[derive(Clone, Debug)]
pub struct Optimizer<S: Scalar = f64> {
    kind: OptimizerKind,
    learning_rate: f64,
    moments: HashMap<ParamId, Moments<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            moments: HashMap::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::adam(), learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<S>> {
        self.moments.get(&id)
    }

    /// Apply one update to every touched trainable parameter, then clear all grads.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        let lr = S::lit(self.learning_rate);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable || !p.has_grad() {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w = *w - lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.moments.entry(id).or_insert_with(|| Moments {
                        first: Tensor::zeros(p.value.shape().to_vec()),
                        second: Tensor::zeros(p.value.shape().to_vec()),
                        steps: 0,
                    });
                    m.steps += 1;
                    let (b1, b2, eps) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                    let bc1 = S::one() - b1.powi(m.steps as i32);
                    let bc2 = S::one() - b2.powi(m.steps as i32);
                    let grads = p.grad.data();
                    let first = m.first.data_mut();
                    let second = m.second.data_mut();
                    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grads[i];
                        first[i] = b1 * first[i] + (S::one() - b1) * g;
                        second[i] = b2 * second[i] + (S::one() - b2) * g * g;
                        let m_hat = first[i] / bc1;
                        let v_hat = second[i] / bc2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn one_param(v: f64, trainable: bool) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full([1, 1], v), trainable).unwrap();
        (store, id)
    }

    fn sum_backward(store: &mut ParamStore, id: ParamId) {
        let mut g = Graph::new();
        let w = g.param(store, id);
        let loss = g.sum(w);
        g.backward(loss).unwrap().apply_to(store).unwrap();
    }

    #[test]
    fn sgd_step() {
        let (mut store, id) = one_param(1.0, true);
        sum_backward(&mut store, id);
        Optimizer::sgd(0.1).step(&mut store);
        assert_eq!(store.value(id).data(), &[0.9]);
        assert!(!store.get(id).has_grad());
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // m = 0.1 g, v = 0.001 g²; m̂ = g, v̂ = g²; Δ = -lr·g/(|g| + eps)
        let (mut store, id) = one_param(0.5, true);
        sum_backward(&mut store, id);
        let mut opt = Optimizer::adam(0.01);
        opt.step(&mut store);
        let expected = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((store.value(id).data()[0] - expected).abs() < 1e-15);
        let m = opt.moments(id).unwrap();
        assert_eq!(m.first.shape(), &[1, 1]);
        assert_eq!(m.steps, 1);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut store, id) = one_param(0.25, false);
        let before = store.value(id).clone();
        let mut opt = Optimizer::adam(1.0);
        for _ in 0..10 {
            sum_backward(&mut store, id);
            opt.step(&mut store);
        }
        assert!(store.value(id).bit_eq(&before));
        assert!(opt.moments(id).is_none());
    }

    #[test]
    fn sgd_has_no_moments() {
        let (mut store, id) = one_param(1.0, true);
        let mut opt = Optimizer::sgd(0.1);
        sum_backward(&mut store, id);
        opt.step(&mut store);
        assert!(opt.moments(id).is_none());
    }
}
