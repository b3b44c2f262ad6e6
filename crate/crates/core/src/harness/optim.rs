//! AdamW with decoupled weight decay, and an exponential moving average of
//! the weights.

use std::collections::BTreeMap;

use crate::graph::{Gradients, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter moment state. Parameters without a gradient entry in a
/// step are left untouched, including their weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub(crate) state: BTreeMap<String, Moments>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Moments {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        let c = self.config;
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let pd = p.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..pd.len() {
                let g = grad.data()[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                pd[i] -= c.lr * c.weight_decay * pd[i];
                pd[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// EMA with the usual warm-up: the effective decay is
/// `min(decay, (1 + n) / (10 + n))` after `n` prior updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub updates: u64,
    pub shadow: ParamSet,
}

impl Ema {
    pub fn new(decay: f64, params: &ParamSet) -> Self {
        Self {
            decay,
            updates: 0,
            shadow: params.clone(),
        }
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &ParamSet) {
        let d = self.effective_decay();
        for (name, p) in params.iter() {
            match self.shadow.get_mut(name) {
                Some(s) => {
                    for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                        *sv = d * *sv + (1.0 - d) * pv;
                    }
                }
                None => self.shadow.insert(name.clone(), p.clone()),
            }
        }
        self.updates += 1;
    }
}
