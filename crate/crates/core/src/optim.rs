//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::graph::Gradients;
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<ParamId, Vec<f64>>,
    second: BTreeMap<ParamId, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Only parameters that appear both in a store and in `grads` move.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for store in stores.iter_mut() {
            for (id, param) in store.iter_mut() {
                let Some(grad) = grads.get(id) else { continue };
                let n = param.numel();
                let m = self.first.entry(id.clone()).or_insert_with(|| vec![0.0; n]);
                let v = self.second.entry(id.clone()).or_insert_with(|| vec![0.0; n]);
                for (((p, g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                    let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                    *p -= self.lr * (update + self.weight_decay * *p);
                }
            }
        }
    }
}
