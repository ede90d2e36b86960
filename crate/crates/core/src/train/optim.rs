//! AdamW with decoupled weight decay, polynomial learning-rate decay and
//! global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `base · (1 − t/T)^power`, zero from `T` on.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base * (1.0 - step as f64 / total as f64).powf(power)
}

#[derive(Clone, Debug)]
pub struct Moments<T: Real> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64, clip_norm: Option<f64>) -> Self {
        AdamW {
            weight_decay,
            clip_norm,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn update(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<f64> {
        let mut sq = 0.0;
        for (name, g) in grads {
            if store.is_frozen(name) {
                return Err(Error::Contract(format!(
                    "gradient supplied for frozen parameter `{name}`"
                )));
            }
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{name}` at step {}",
                    self.step + 1
                )));
            }
            sq += g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shapes("adamw", p.shape(), g.shape()));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gv.as_f64() * clip;
                let mi = BETA1 * m[i].as_f64() + (1.0 - BETA1) * gi;
                let vi = BETA2 * v[i].as_f64() + (1.0 - BETA2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let x = pv.as_f64();
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + EPS) + self.weight_decay * x;
                *pv = T::from_f64(x - lr * upd);
            }
            if !p.all_finite() {
                return Err(Error::Numeric(format!(
                    "parameter `{name}` became non-finite at step {}",
                    self.step
                )));
            }
        }
        Ok(norm)
    }
}
