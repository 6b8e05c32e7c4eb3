use indexmap::IndexMap;

use super::{TrainError, TrainResult};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments per named parameter. The update math runs in 64-bit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    /// Decoupled decay (AdamW); 0 for plain Adam.
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One bias-corrected step over `params`, each paired with its
    /// gradient. Fails before touching anything if a gradient is not
    /// finite.
    pub fn step<'a, T: Real + 'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
        hp: AdamParams,
    ) -> TrainResult<()> {
        let params: Vec<_> = params.into_iter().collect();
        for (name, p, g) in &params {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient((*name).to_string()));
            }
            if p.shape() != g.shape() {
                return Err(TrainError::Invalid(format!("gradient shape mismatch for {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, p, g) in params {
            let n = p.len();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi.as_f64();
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let mut x = pi.as_f64();
                if hp.weight_decay != 0.0 {
                    x -= hp.lr * hp.weight_decay * x;
                }
                x -= hp.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                *pi = T::from_f64(x);
            }
        }
        Ok(())
    }
}

/// `eta_min + (lr_max - eta_min) * (1 + cos(pi * epoch / max_epochs)) / 2`.
pub fn cosine_lr(epoch: usize, max_epochs: usize, lr_max: f64, eta_min: f64) -> TrainResult<f64> {
    if max_epochs == 0 || epoch > max_epochs {
        return Err(TrainError::Invalid(format!(
            "epoch {epoch} outside schedule of {max_epochs} epochs"
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / max_epochs as f64;
    Ok(eta_min + 0.5 * (lr_max - eta_min) * (1.0 + phase.cos()))
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::from_f64(v.as_f64() * s);
            }
        }
    }
    norm
}
