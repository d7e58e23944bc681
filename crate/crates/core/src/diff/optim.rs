use serde::{Deserialize, Serialize};

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum,
    Adam,
}

/// Applies one update from the store's accumulated gradients.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore);
}

/// Plain SGD; with `momentum > 0` uses heavy-ball velocity.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr, momentum: 0.0, velocity: Vec::new() }
    }

    pub fn with_momentum(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore) {
        if self.lr == 0.0 {
            return;
        }
        let ids: Vec<_> = store.ids().collect();
        if self.velocity.len() != ids.len() {
            self.velocity = ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
        }
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let vel = &mut self.velocity[k];
            for ((p, &g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore) {
        if self.lr == 0.0 {
            return;
        }
        let ids: Vec<_> = store.ids().collect();
        if self.m.len() != ids.len() {
            self.m = ids.iter().map(|&id| vec![0.0; store.value(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            for (i, (p, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn make_optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd::new(lr)),
        OptimizerKind::Momentum => Box::new(Sgd::with_momentum(lr, 0.9)),
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn store_with_grad() -> ParamStore {
        let mut s = ParamStore::new(0);
        let id = s.add("w", Tensor::new(vec![3], vec![-0.0, 1.5, -2.0]).unwrap()).unwrap();
        s.accumulate_grad(id, &Tensor::new(vec![3], vec![0.3, -0.7, 2.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam] {
            let mut s = store_with_grad();
            let before: Vec<u64> = s.value(s.find("w").unwrap()).data().iter().map(|v| v.to_bits()).collect();
            let mut opt = make_optimizer(kind, 0.0);
            for _ in 0..3 {
                opt.step(&mut s);
            }
            let after: Vec<u64> = s.value(s.find("w").unwrap()).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(before, after);
        }
    }

    #[test]
    fn sgd_step() {
        let mut s = store_with_grad();
        Sgd::new(0.1).step(&mut s);
        let w = s.value(s.find("w").unwrap()).data();
        assert!((w[1] - 1.57).abs() < 1e-12);
        assert!((w[2] + 2.2).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store_with_grad();
        Adam::new(0.01).step(&mut s);
        let w = s.value(s.find("w").unwrap()).data();
        assert!((w[1] - 1.51).abs() < 1e-6);
    }
}
