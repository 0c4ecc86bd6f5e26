use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.grad.data();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn sgd_update(store: &mut ParamStore, lr: f64) {
    for p in store.iter_mut() {
        let g = p.grad.data().to_vec();
        for (w, g) in p.value.data_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(Adam::new(store)),
            OptimizerKind::Sgd => Self::Sgd,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        match self {
            Self::Adam(a) => a.update(store, lr),
            Self::Sgd => sgd_update(store, lr),
        }
    }
}

/// Linear warm-up followed by inverse square-root decay; a warm-up of 0
/// gives a constant rate.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 {
        return base;
    }
    let s = (step + 1) as f64;
    let w = warmup as f64;
    base * (s / w).min((w / s).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic_bowl() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(vec![3.0, -2.0, 0.5])).unwrap();
        let target = [1.0, 0.5, -1.0];
        let mut adam = Adam::new(&store);
        adam.beta1 = 0.5;
        adam.beta2 = 0.999;
        adam.eps = 1e-12;
        let mut steps = 0;
        for i in 0..200 {
            let x = store.value(id).data().to_vec();
            let loss: f64 = x.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
            if loss < 1e-12 {
                break;
            }
            steps = i + 1;
            let grad: Vec<f64> = x.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            store.get_mut(id).grad = Tensor::row_vector(grad);
            adam.update(&mut store, 0.3);
        }
        let x = store.value(id).data();
        for (a, b) in x.iter().zip(target) {
            assert!((a - b).abs() < 1e-6, "x={x:?} after {steps} steps");
        }
    }

    #[test]
    fn warmup_peaks_at_base() {
        assert!((learning_rate(1.0, 10, 9) - 1.0).abs() < 1e-12);
        assert!(learning_rate(1.0, 10, 0) < 0.2);
        assert!(learning_rate(1.0, 10, 39) < 0.6);
        assert_eq!(learning_rate(0.5, 0, 1000), 0.5);
    }
}
