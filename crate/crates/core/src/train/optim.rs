//! Decoupled AdamW and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Precision;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moment buffers for trainable parameters only, plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWParams {
    pub lr: f64,
    /// Schedule multiplier for weight decay, `lr / peak_lr`.
    pub decay_fraction: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    let all = || grads.values().flat_map(|g| g.iter());
    let plain = all().map(|x| x * x).sum::<f64>().sqrt();
    if plain.is_finite() {
        return plain;
    }
    // Squares overflowed; rescale by the largest magnitude first.
    let peak = all().fold(0.0f64, |m, x| m.max(x.abs()));
    if !peak.is_finite() {
        return peak + all().sum::<f64>();
    }
    peak * all().map(|x| (x / peak) * (x / peak)).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

impl OptimizerState {
    /// One AdamW step over the parameters present in `grads`.
    ///
    /// `w ← w·(1 − decay_fraction·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, hp: AdamWParams) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = hp.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let precision = store.precision();
        let decay = 1.0 - hp.decay_fraction * hp.weight_decay;
        for (name, g) in grads {
            let param = store.get_mut(name).expect("gradient for a known parameter");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let w = param.data_mut();
            for i in 0..g.len() {
                mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g[i];
                mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                w[i] = w[i] * decay - hp.lr * mhat / (vhat.sqrt() + hp.eps);
            }
            if precision == Precision::Standard {
                precision.round_slice(w);
                precision.round_slice(&mut mom.m);
                precision.round_slice(&mut mom.v);
            }
        }
    }
}
