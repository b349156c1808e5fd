//! Adam with bias correction.

use serde::{Deserialize, Serialize};
use skilledit_core::Real;

use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

/// One in-place update of `params`; `state` is lazily sized.
pub fn adam_step<S: Real>(params: &mut [S], grads: &[S], state: &mut AdamState<S>, lr: f64, betas: (f64, f64), eps: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    if state.m.len() != params.len() {
        state.m = vec![S::zero(); params.len()];
        state.v = vec![S::zero(); params.len()];
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let (b1s, b2s) = (S::of(b1), S::of(b2));
    let (one_b1, one_b2) = (S::of(1.0 - b1), S::of(1.0 - b2));
    let (c1, c2, lr, eps) = (S::of(c1), S::of(c2), S::of(lr), S::of(eps));
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        *m = b1s * *m + one_b1 * g;
        *v = b2s * *v + one_b2 * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam over a whole [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub config: AdamConfig,
    states: Vec<AdamState<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        Self { config, states: vec![AdamState { m: Vec::new(), v: Vec::new(), step: 0 }; store.len()] }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Grads<S>) {
        let c = self.config;
        for (i, state) in self.states.iter_mut().enumerate() {
            let id = crate::params::ParamId(i);
            if let Some(g) = grads.get(id) {
                adam_step(store.get_mut(id).data_mut(), g, state, c.lr, (c.beta1, c.beta2), c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![0.3f64, -1.0];
        let mut s = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-2, (0.9, 0.999), 1e-8);
        }
        assert_eq!(p, vec![0.3, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 5e-5;
        let mut p = vec![1.0f64];
        let mut s = AdamState::default();
        adam_step(&mut p, &[1.0], &mut s, lr, (0.9, 0.999), 1e-8);
        assert!(((1.0 - p[0]) - lr).abs() <= 1e-12);
        let mut q = vec![1.0f64];
        let mut s = AdamState::default();
        adam_step(&mut q, &[1.0], &mut s, 1e-3, (0.9, 0.999), 0.0);
        assert!(((1.0 - q[0]) - 1e-3).abs() <= 1e-12);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // loss = (p - 3)^2
        let mut p = vec![0.0f64];
        let mut s = AdamState::default();
        let mut prev = 9.0;
        for _ in 0..100 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut s, 1e-2, (0.9, 0.999), 1e-8);
            let loss = (p[0] - 3.0) * (p[0] - 3.0);
            assert!(loss < prev);
            prev = loss;
        }
    }
}
