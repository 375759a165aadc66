use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Gradients, ParamId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    param: ParamId,
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam with bias correction. One state slot per optimized parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    slots: Vec<Slot<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, params: impl IntoIterator<Item = ParamId>, cfg: AdamConfig) -> Self {
        let mut slots: Vec<Slot<T>> = Vec::new();
        for id in params {
            if slots.iter().any(|s| s.param == id) {
                continue;
            }
            let n = store.value(id).len();
            slots.push(Slot {
                param: id,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
        }
        Adam { cfg, slots, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|s| s.param)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for slot in &self.slots {
            if grads.param(slot.param).is_none() {
                return Err(Error::MissingGrad(store.name(slot.param).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64_lossy(self.cfg.beta1);
        let b2 = T::from_f64_lossy(self.cfg.beta2);
        let eps = T::from_f64_lossy(self.cfg.eps);
        let lr = T::from_f64_lossy(lr);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for slot in &mut self.slots {
            let g = grads.param(slot.param).expect("checked above");
            let p = store.value_mut(slot.param).data_mut();
            for i in 0..p.len() {
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * g[i];
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = slot.m[i] / c1;
                let vhat = slot.v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
