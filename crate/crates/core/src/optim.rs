//! AdamW with decoupled weight decay, cosine learning-rate decay, and an
//! exponential moving average of the parameters used for evaluation.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        let v = store.entries().iter().map(|e| vec![0.0; e.values.len()]).collect();
        AdamWState { m, v, step: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// One AdamW step. Weight decay is decoupled: `theta -= lr * wd * theta`
/// applied separately from the adaptive-moment update.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} grads for {} params",
            grads.len(),
            store.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for i in 0..store.len() {
        let entry = store.get_mut(i);
        let g = &grads[i];
        if g.len() != entry.values.len() {
            return Err(Error::Contract(format!(
                "adamw_step: grad for {} has {} entries, expected {}",
                entry.name,
                g.len(),
                entry.values.len()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for t in 0..g.len() {
            m[t] = hp.beta1 * m[t] + (1.0 - hp.beta1) * g[t];
            v[t] = hp.beta2 * v[t] + (1.0 - hp.beta2) * g[t] * g[t];
            let mhat = m[t] / bc1;
            let vhat = v[t] / bc2;
            entry.values[t] -= lr * hp.weight_decay * entry.values[t];
            entry.values[t] -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// `lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi step / total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(Error::Contract(format!(
            "cosine_lr: step {step} outside 0..={total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Shadow copy of every parameter; evaluation reads the shadow, training
/// updates the live values.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Vec<f64>>,
}

impl EmaState {
    pub fn new(store: &ParamStore, decay: f64) -> Self {
        EmaState {
            decay,
            shadow: store.entries().iter().map(|e| e.values.clone()).collect(),
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`, elementwise.
    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        if self.shadow.len() != store.len() {
            return Err(Error::Contract(format!(
                "ema_update: {} shadows for {} params",
                self.shadow.len(),
                store.len()
            )));
        }
        for (i, s) in self.shadow.iter_mut().enumerate() {
            let p = &store.get(i).values;
            if s.len() != p.len() {
                return Err(Error::Contract(format!(
                    "ema_update: shape drift on {}",
                    store.get(i).name
                )));
            }
            for (sv, pv) in s.iter_mut().zip(p) {
                *sv = self.decay * *sv + (1.0 - self.decay) * pv;
            }
        }
        Ok(())
    }

    /// A copy of the store holding the shadow values.
    pub fn shadow_store(&self, store: &ParamStore) -> Result<ParamStore> {
        let mut out = store.clone();
        for i in 0..out.len() {
            out.set_values(i, self.shadow[i].clone())?;
        }
        Ok(out)
    }
}
