//! Adam with bias correction and a half-life learning-rate schedule.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Moment estimates for one parameter. Each parameter counts its own steps so
/// parameters that sit out a step (an unused class head) keep correct bias
/// correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    /// Epochs over which the learning rate halves.
    pub half_life: f64,
    /// Number of optimizer steps taken.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(base_lr: f64, half_life: f64) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_lr,
            half_life,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// `η(epoch) = η₀ · 2^(−epoch / P)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * (-(epoch as f64) / self.half_life).exp2()
    }

    /// One Adam update of every parameter named in `grads`.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        epoch: usize,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .trainable
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.t += 1;
        let lr = self.learning_rate(epoch);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (name, g) in grads {
            let p = params.trainable.get_mut(name).expect("checked above");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                step: 0,
            });
            mom.step += 1;
            let c1 = 1.0 - b1.powi(mom.step as i32);
            let c2 = 1.0 - b2.powi(mom.step as i32);
            let m = mom.m.data_mut();
            let v = mom.v.data_mut();
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
