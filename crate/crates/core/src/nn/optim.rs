use ndarray::ArrayD;
use std::collections::HashMap;

use super::store::{ParamId, ParamStore};

/// Adam with L2-style weight decay (decay folded into the gradient).
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<ParamId, ArrayD<f64>>,
    v: HashMap<ParamId, ArrayD<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over all trainable parameters using their accumulated grads.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let grad = if self.weight_decay != 0.0 {
                store.grad(id) + &(store.value(id) * self.weight_decay)
            } else {
                store.grad(id).clone()
            };
            let m = self
                .m
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *m = &*m * self.beta1 + &grad * (1.0 - self.beta1);
            let v = self
                .v
                .entry(id)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v = &*v * self.beta2 + &(&grad * &grad) * (1.0 - self.beta2);
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let update = &mhat / &(vhat.mapv(f64::sqrt) + self.eps);
            let value = store.value_mut(id);
            *value = &*value - &(update * lr);
        }
    }
}
