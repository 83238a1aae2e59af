use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (name, p) in params.iter_mut() {
            let Some(gt) = grads.get(name) else { continue };
            if gt.shape() != p.shape() {
                return Err(Error::shape("adam", format!("gradient of `{name}` is {:?}", gt.shape())));
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); gt.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); gt.len()]);
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(gt.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gr;
                *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient entry, accumulated in `f64`.
pub fn global_norm<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads.values().flat_map(|t| t.data()).map(|&g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}
