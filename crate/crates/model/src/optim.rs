//! AdamW with decoupled weight decay and bias-corrected moments. Only
//! trainable (non-frozen) parameters are registered; frozen tensors are never
//! touched.

use emstack_tensor::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::ParamEntry;
#[cfg(test)]
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW<T: Scalar> {
    pub cfg: OptimConfig,
    pub step: u64,
    names: Vec<String>,
    vars: Vec<Var>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Register the non-frozen entries of the given parameter listing.
    pub fn new<'a>(
        tape: &Tape<T>,
        entries: impl IntoIterator<Item = &'a ParamEntry>,
        cfg: OptimConfig,
    ) -> Self {
        let mut names = Vec::new();
        let mut vars = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in entries.into_iter().filter(|e| !e.frozen) {
            names.push(e.name.clone());
            vars.push(e.var);
            let n = tape.data(e.var).numel();
            m.push(vec![T::zero(); n]);
            v.push(vec![T::zero(); n]);
        }
        AdamW {
            cfg,
            step: 0,
            names,
            vars,
            m,
            v,
        }
    }

    pub fn param_count(&self) -> usize {
        self.vars.len()
    }

    /// Apply one update; every registered parameter must carry a gradient.
    pub fn step(&mut self, tape: &mut Tape<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(self.cfg.lr);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let decay = one - lr * T::from_f64(self.cfg.weight_decay);
        for (i, &var) in self.vars.iter().enumerate() {
            let grad = tape
                .grad(var)
                .ok_or_else(|| {
                    ModelError::Optimizer(format!(
                        "trainable parameter {} has no gradient",
                        self.names[i]
                    ))
                })?
                .to_vec();
            let data = tape.data_mut(var);
            for (j, g) in grad.iter().enumerate() {
                let p = &mut data.data_mut()[j];
                if self.cfg.weight_decay != 0.0 {
                    *p = *p * decay;
                }
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self, tape: &mut Tape<T>) {
        for &v in &self.vars {
            tape.zero_grad(v);
        }
    }

    /// Moment state as named tensors for checkpointing.
    pub fn state_entries(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            out.push((format!("optim.m.{name}"), self.m[i].clone()));
            out.push((format!("optim.v.{name}"), self.v[i].clone()));
        }
        out
    }

    pub fn restore_state(&mut self, step: u64, entries: &[(String, Vec<T>)]) -> Result<()> {
        self.step = step;
        for (i, name) in self.names.iter().enumerate() {
            let want_m = format!("optim.m.{name}");
            let want_v = format!("optim.v.{name}");
            for (key, data) in entries {
                if *key == want_m {
                    if data.len() != self.m[i].len() {
                        return Err(ModelError::Optimizer(format!(
                            "moment size mismatch for {name}"
                        )));
                    }
                    self.m[i] = data.clone();
                } else if *key == want_v {
                    if data.len() != self.v[i].len() {
                        return Err(ModelError::Optimizer(format!(
                            "moment size mismatch for {name}"
                        )));
                    }
                    self.v[i] = data.clone();
                }
            }
        }
        Ok(())
    }
}
