use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    moments: Vec<(String, Moments)>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let moments = store
            .iter()
            .map(|(name, e)| {
                (
                    name.to_string(),
                    Moments {
                        m: Tensor::zeros(e.value.shape()),
                        v: Tensor::zeros(e.value.shape()),
                    },
                )
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One bias-corrected Adam update on every trainable entry, then clears
    /// all gradients. Frozen entries are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) -> Result<()> {
        if store.len() != self.moments.len() {
            return Err(Error::usage("parameter store does not match optimizer state"));
        }
        for ((name, entry), (mname, _)) in store.iter().zip(&self.moments) {
            if name != mname {
                return Err(Error::usage(format!(
                    "optimizer state expects `{mname}`, store has `{name}`"
                )));
            }
            if entry.trainable && !entry.grad_ready {
                return Err(Error::usage(format!("missing gradient for `{name}`")));
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for ((_, entry), (_, mom)) in store.iter_mut().zip(&mut self.moments) {
            if !entry.trainable {
                continue;
            }
            let values = entry.value.data_mut();
            let grads = entry.grad.data_mut();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            let (inv1, inv2) = (1.0 / correction1, 1.0 / correction2);
            let n = values.len();
            let (grads, m, v) = (&mut grads[..n], &mut m[..n], &mut v[..n]);
            // The gradient is cleared in the same pass.
            for i in 0..n {
                let g = std::mem::take(&mut grads[i]);
                let mi = flush(beta1 * m[i] + (1.0 - beta1) * g);
                let vi = flush(beta2 * v[i] + (1.0 - beta2) * g * g);
                m[i] = mi;
                v[i] = vi;
                values[i] -= lr * (mi * inv1) / ((vi * inv2).sqrt() + eps);
            }
            entry.grad_ready = false;
        }
        store.zero_grads();
        Ok(())
    }
}

/// Moments of parameters that stop receiving gradient (dead ReLU units)
/// decay geometrically into the subnormal range, where x86 arithmetic is
/// two orders of magnitude slower. Flushing them to zero changes nothing
/// observable in the update.
#[inline]
fn flush(x: f32) -> f32 {
    let keep = (x.abs() >= f32::MIN_POSITIVE) as u32 as f32;
    x * keep
}
