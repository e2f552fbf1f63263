//! Decoupled-weight-decay Adam and the warmup + cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diff::{Real, Tensor};
use crate::error::{LayaError, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || {
            params
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape().to_vec())))
                .collect()
        };
        AdamState { t: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update in place. Parameters flagged without decay get the
/// plain adaptive step.
pub fn adamw_update<F: Real>(
    params: &mut ParamStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState<F>,
    cfg: &AdamWConfig,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let f = F::from_f64_lossy;
    for (name, p) in params.params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if !g.is_finite() {
            return Err(LayaError::NonFinite { op: "adamw" });
        }
        let m = state.m.get_mut(name).expect("moment for every parameter");
        let v = state.v.get_mut(name).expect("moment for every parameter");
        let decay = if p.decay { lr * weight_decay } else { 0.0 };
        let (fb1, fb2, f1b1, f1b2) = (f(b1), f(b2), f(1.0 - b1), f(1.0 - b2));
        let (fbc1, fbc2, flr, feps, fkeep) = (f(bc1), f(bc2), f(lr), f(cfg.eps), f(1.0 - decay));
        let pd = p.value.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = fb1 * md[i] + f1b1 * gi;
            vd[i] = fb2 * vd[i] + f1b2 * gi * gi;
            let mhat = md[i] / fbc1;
            let vhat = vd[i] / fbc2;
            pd[i] = pd[i] * fkeep - flr * mhat / (vhat.sqrt() + feps);
        }
    }
    Ok(())
}

/// Global L2 norm; rescales in place when above `max_norm` (> 0).
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then cosine decay
/// reaching `min_lr` at the final step `steps - 1`.
pub fn lr_at(step: usize, steps: usize, warmup: usize, lr: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let span = steps.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return min_lr;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}
