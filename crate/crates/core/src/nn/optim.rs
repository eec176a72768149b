//! Adam optimizer over one parameter group.

use ndarray::ArrayD;

use super::params::{ParamGroup, ParamId, ParamStore};

/// Adam with optional decoupled-from-nothing L2 weight decay (the decay term
/// is added to the gradient before the moment update, matching the common
/// `weight_decay` semantics).
#[derive(Debug)]
pub struct Adam {
    ids: Vec<ParamId>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    /// Optimizer over every parameter in `group`.
    pub fn for_group(store: &ParamStore, group: ParamGroup, weight_decay: f64) -> Self {
        let ids = store.ids_in_group(group);
        let m = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Adam {
            ids,
            m,
            v,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update over the group's accumulated gradients. Gradients are not
    /// cleared here; callers zero the store between steps.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            // grad + weight decay, read before mutating the store entry
            let g: ArrayD<f64> = if self.weight_decay != 0.0 {
                store.grad(id) + &store.value(id).mapv(|w| w * self.weight_decay)
            } else {
                store.grad(id).clone()
            };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            m.zip_mut_with(&g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(&g, |vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
            });
            let w = store.value_mut(id);
            ndarray::Zip::from(&mut *w)
                .and(&*m)
                .and(&*v)
                .for_each(|wi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *wi -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}
