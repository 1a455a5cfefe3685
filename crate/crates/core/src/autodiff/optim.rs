//! Adam and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, one slot per parameter entry (`None` for
    /// buffers).
    pub moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: params
                .ids()
                .map(|id| {
                    params.is_trainable(id).then(|| {
                        let n = params.get(id).len();
                        (vec![0.0; n], vec![0.0; n])
                    })
                })
                .collect(),
        }
    }

    /// One bias-corrected Adam update. Any non-finite gradient aborts before
    /// a parameter is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if grads.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Training(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (id, g) in params.ids().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((id, g), slot) in params.ids().zip(grads).zip(&mut self.moments) {
            let (Some(g), Some((m, v))) = (g, slot) else { continue };
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors `m/<name>` and `v/<name>`.
    pub fn state_tensors(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (id, slot) in params.ids().zip(&self.moments) {
            if let Some((m, v)) = slot {
                let shape = params.get(id).shape().to_vec();
                let name = params.name(id);
                out.push((format!("m/{name}"), Tensor::new(shape.clone(), m.clone()).unwrap()));
                out.push((format!("v/{name}"), Tensor::new(shape, v.clone()).unwrap()));
            }
        }
        out
    }

    pub fn load_state(
        &mut self,
        params: &ParamSet,
        step: u64,
        lookup: impl Fn(&str) -> Option<Tensor>,
    ) -> Result<()> {
        self.step = step;
        for (id, slot) in params.ids().zip(&mut self.moments) {
            if let Some((m, v)) = slot {
                let name = params.name(id);
                for (key, dst) in [(format!("m/{name}"), m), (format!("v/{name}"), v)] {
                    let t = lookup(&key)
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer tensor {key}")))?;
                    if t.len() != dst.len() {
                        return Err(Error::Format(format!("optimizer tensor {key} has wrong size")));
                    }
                    dst.copy_from_slice(t.data());
                }
            }
        }
        Ok(())
    }

    pub fn moment_of(&self, id: ParamId) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without strict improvement, never going below `floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    #[serde(with = "crate::container::json_f64")]
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, floor: f64) -> Result<Self> {
        if patience == 0 || !(factor > 0.0 && factor < 1.0) || !(lr > 0.0) || !(floor >= 0.0) {
            return Err(Error::Config(format!(
                "invalid plateau schedule lr={lr} factor={factor} patience={patience} floor={floor}"
            )));
        }
        Ok(Self {
            lr,
            factor,
            patience,
            floor,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    /// Records one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
