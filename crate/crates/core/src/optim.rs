//! RMSprop over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { lr: 0.003, decay: 0.9, eps: 1e-8 }
    }
}

/// `v <- decay v + (1 - decay) g^2;  w <- w - lr g / sqrt(v + eps)`.
pub fn rmsprop_step<T: Real>(w: &mut [T], g: &[T], v: &mut [T], cfg: &RmsPropConfig) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::Contract(format!(
            "rmsprop: {} weights, {} grads, {} accumulators",
            w.len(),
            g.len(),
            v.len()
        )));
    }
    let (decay, lr, eps) = (T::of(cfg.decay), T::of(cfg.lr), T::of(cfg.eps));
    let keep = T::one() - decay;
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = decay * *v + keep * g * g;
        *w = *w - lr * g / (*v + eps).sqrt();
    }
    Ok(())
}

/// Optimiser state keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct RmsProp<T> {
    pub cfg: RmsPropConfig,
    accum: BTreeMap<String, Vec<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(cfg: RmsPropConfig) -> Self {
        RmsProp { cfg, accum: BTreeMap::new() }
    }

    /// Updates every parameter named in `grads`; others are untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>) -> Result<()> {
        for (name, g) in grads {
            let w = params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            let v = self.accum.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            rmsprop_step(w.data_mut(), g, v, &self.cfg)?;
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flatten()
        .map(|g| {
            let g = g.to_f64().unwrap_or(0.0);
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut().flatten() {
            *g = *g * s;
        }
    }
    norm
}
