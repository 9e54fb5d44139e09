//! AdamW with decoupled weight decay, plus global-norm clipping.

use crate::autograd::{Gradients, Matrix};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; num_params],
            v: vec![None; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient. Row
    /// vectors (biases, norm gains) are not decayed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let p = store.get_mut(id);
            let decay = if p.nrows() > 1 { weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
                });
        }
    }
}

/// Scales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Graph, array![[1.0, -1.0], [0.5, 0.0]]);
        let mut grads = Gradients::zeros_like(&store);
        grads.params[id.0] = Some(array![[2.0, -3.0], [0.0, 1.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            store.len(),
        );
        opt.step(&mut store, &grads);
        let p = store.get(id);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 0.9).abs() < 1e-6);
        assert_eq!(p[[1, 0]], 0.5);
        assert!((p[[1, 1]] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Graph, array![[1.0]]);
        store.set_trainable(id, false);
        let mut grads = Gradients::zeros_like(&store);
        grads.params[id.0] = Some(array![[1.0]]);
        let mut opt = AdamW::new(AdamWConfig::default(), 1);
        opt.step(&mut store, &grads);
        assert_eq!(store.get(id)[[0, 0]], 1.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Graph, array![[0.0, 0.0]]);
        let mut grads = Gradients::zeros_like(&store);
        grads.params[id.0] = Some(array![[3.0, 4.0]]);
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
