//! Schedule-free AdamW.
//!
//! Three sequences are kept per parameter: the Adam iterate `z`, the uniform
//! running average `x` of the iterates, and the evaluation point
//! `y = (1 − β₁)·z + β₁·x` at which gradients are taken. One step with
//! gradient `g` (taken at `y`) is:
//!
//! ```text
//! t  ← t + 1
//! v  ← β₂·v + (1 − β₂)·g²
//! z  ← z − γ·( g / (√(v / (1 − β₂ᵗ)) + ε) + λ·y )
//! x  ← (1 − 1/t)·x + (1/t)·z
//! y  ← (1 − β₁)·z + β₁·x
//! ```
//!
//! The trained parameters are `x`; the model holds `y` between steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfAdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for SfAdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state for a fixed list of parameter slices.
#[derive(Clone, Debug)]
pub struct SfAdamW {
    cfg: SfAdamWConfig,
    t: u64,
    z: Vec<Vec<f32>>,
    x: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl SfAdamW {
    /// Starts with `z = x = y =` the given parameter values.
    pub fn new(cfg: SfAdamWConfig, params: &[&[f32]]) -> Self {
        Self {
            cfg,
            t: 0,
            z: params.iter().map(|p| p.to_vec()).collect(),
            x: params.iter().map(|p| p.to_vec()).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &SfAdamWConfig {
        &self.cfg
    }

    fn check_shapes(&self, params: &[&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.z.len() || grads.len() != self.z.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.z.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, ((p, g), z)) in params.iter().zip(grads).zip(&self.z).enumerate() {
            if p.len() != z.len() || g.len() != z.len() {
                return Err(Error::Contract(format!("tensor {k} changed size")));
            }
        }
        Ok(())
    }

    /// Applies one update. `params` must hold the current evaluation point
    /// `y`; on return it holds the next one.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        self.check_shapes(params, grads)?;
        if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract(format!("non-finite gradient in tensor {k}")));
        }
        self.t += 1;
        let SfAdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let inv_bc2 = 1.0 / (1.0 - (beta2 as f64).powi(self.t.min(i32::MAX as u64) as i32)) as f32;
        let c = 1.0 / self.t as f32;
        for (k, param) in params.iter_mut().enumerate() {
            let (z, x, v) = (&mut self.z[k], &mut self.x[k], &mut self.v[k]);
            for i in 0..param.len() {
                let g = grads[k][i];
                let y = param[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                z[i] -= lr * (g / denom + weight_decay * y);
                x[i] += c * (z[i] - x[i]);
                param[i] = x[i] + (1.0 - beta1) * (z[i] - x[i]);
            }
        }
        Ok(())
    }

    /// Overwrites `params` with the averaged sequence `x`.
    pub fn write_average(&self, params: &mut [&mut [f32]]) {
        for (p, x) in params.iter_mut().zip(&self.x) {
            p.copy_from_slice(x);
        }
    }

    pub fn average(&self) -> &[Vec<f32>] {
        &self.x
    }
}
