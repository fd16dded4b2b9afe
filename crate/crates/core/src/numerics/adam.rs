use std::collections::BTreeMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Initial learning rate of the step schedule.
pub const BASE_LR: f64 = 5e-3;
/// Multiplicative decay applied every [`LR_DECAY_EVERY`] epochs.
pub const LR_DECAY: f64 = 0.9;
pub const LR_DECAY_EVERY: usize = 50;

/// Step-decay schedule: `5e-3 * 0.9^floor(epoch / 50)`.
pub fn lr_at(epoch: usize) -> f64 {
    BASE_LR * LR_DECAY.powi((epoch / LR_DECAY_EVERY) as i32)
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam optimizer state (betas 0.9 / 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(BASE_LR)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update for every `(id, grad)` pair.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, &Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &(id, g) in grads {
            if !params.is_trainable(id) {
                continue;
            }
            let p = params.get_mut(id);
            debug_assert_eq!(p.len(), g.len());
            let mo = self.moments.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mo.m.iter_mut())
                .zip(mo.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        assert_eq!(lr_at(0), 0.005);
        assert!((lr_at(50) - 0.0045).abs() < 1e-15);
        assert!((lr_at(149) - 0.00405).abs() < 1e-15);
        assert_eq!(lr_at(49), 0.005);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row(vec![1.0, -2.0]));
        let g = Tensor::row(vec![0.3, -7.0]);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut store, &[(id, &g)]);
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::row(vec![3.0, -4.0]));
        let mut adam = AdamState::new(0.05);
        for _ in 0..2000 {
            let g = store.get(id).map(|x| 2.0 * x);
            adam.step(&mut store, &[(id, &g)]);
        }
        assert!(store.get(id).norm() < 1e-2);
    }
}
