//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

/// First/second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One AdamW update of `params` in place.
///
/// Decay is applied to the weights directly (`w -= lr * wd * w`) before the
/// bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f32,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::config(format!("learning rate {lr} must be > 0")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::dim(format!(
                "adamw: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "adamw: non-finite gradient in parameter {i} at element {j}"
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * c.weight_decay * *w;
            *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f32,
    pub lr_min: f32,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn new(total_epochs: usize) -> Self {
        CosineSchedule {
            lr_max: 5e-4,
            lr_min: 1e-5,
            total_epochs,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f32> {
        if epoch >= self.total_epochs {
            return Err(Error::config(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if self.total_epochs == 1 {
            return Ok(self.lr_max);
        }
        let frac = epoch as f64 / (self.total_epochs - 1) as f64;
        let (lo, hi) = (self.lr_min as f64, self.lr_max as f64);
        Ok((lo + 0.5 * (hi - lo) * (1.0 + (PI * frac).cos())) as f32)
    }
}
