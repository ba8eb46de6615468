//! Adam with bias-corrected moment estimates.

use crate::autodiff::Tensor;
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient entry are treated as
    /// having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut by_id: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        for id in store.ids() {
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            match by_id[i] {
                Some(g) => {
                    for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        *mj = beta1 * *mj + (1.0 - beta1) * gj;
                        *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                        *pj -= learning_rate * (*mj / bc1) / ((*vj / bc2).sqrt() + epsilon);
                    }
                }
                None => {
                    for ((pj, mj), vj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mj *= beta1;
                        *vj *= beta2;
                        *pj -= learning_rate * (*mj / bc1) / ((*vj / bc2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::row(vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.1), &store);
        adam.step(&mut store, &[(p, Tensor::row(vec![3.0, -0.5]))]);
        let v = store.get(p).data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(5.0));
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.05), &store);
        for _ in 0..2000 {
            let x = store.get(p).item();
            adam.step(&mut store, &[(p, Tensor::scalar(2.0 * (x - 1.5)))]);
        }
        assert!((store.get(p).item() - 1.5).abs() < 1e-3);
    }
}
