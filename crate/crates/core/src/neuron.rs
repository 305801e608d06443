//! Leaky integrate-and-fire dynamics, the arctan surrogate, and direct encoding.

use std::f32::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{stack0, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reset {
    /// Subtract the threshold from the membrane after a spike.
    Soft,
    /// Zero the membrane after a spike.
    Hard,
}

/// What the spike nonlinearity emits in the forward pass.
///
/// `Smooth` replaces the Heaviside step by the integral of the surrogate
/// (`0.5 + atan(pi/2 * alpha * (v - v_th)) / pi`) while keeping the reset driven
/// by the hard threshold. Its exact derivative is the surrogate backward used
/// in `Hard` mode, which makes it the finite-difference reference for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeForward {
    Hard,
    Smooth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LifParams {
    pub beta: f32,
    pub v_th: f32,
    pub reset: Reset,
    pub surrogate_alpha: f32,
    pub forward: SpikeForward,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            beta: 0.5,
            v_th: 1.0,
            reset: Reset::Soft,
            surrogate_alpha: 2.0,
            forward: SpikeForward::Hard,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("beta {} outside (0, 1]", self.beta)));
        }
        if self.v_th.is_nan() || self.v_th <= 0.0 {
            return Err(Error::config(format!("v_th {} must be > 0", self.v_th)));
        }
        if self.surrogate_alpha.is_nan() || self.surrogate_alpha <= 0.0 {
            return Err(Error::config(format!(
                "surrogate_alpha {} must be > 0",
                self.surrogate_alpha
            )));
        }
        Ok(())
    }
}

/// Membrane potential of one layer at one time step.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub v: Tensor,
}

impl LifState {
    pub fn zeros_like(t: &Tensor) -> Self {
        LifState {
            v: Tensor::zeros(t.shape()),
        }
    }
}

/// Arctan surrogate derivative of the spike step, evaluated at `v_pre`.
#[inline]
pub fn surrogate_grad(v_pre: f32, p: &LifParams) -> f32 {
    let x = PI / 2.0 * p.surrogate_alpha * (v_pre - p.v_th);
    p.surrogate_alpha / (2.0 * (1.0 + x * x))
}

/// Integral of [`surrogate_grad`]; the smooth stand-in for the spike step.
#[inline]
pub fn surrogate_step(v_pre: f32, p: &LifParams) -> f32 {
    0.5 + (PI / 2.0 * p.surrogate_alpha * (v_pre - p.v_th)).atan() / PI
}

/// Replicate a `[1, c, h, w]` image over `t` time steps.
pub fn encode_direct(image: &Tensor, t: usize) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::config(
            "direct encoding needs at least one time step",
        ));
    }
    if image.shape()[0] != 1 {
        return Err(Error::dim(format!(
            "direct encoding expects a single image, got shape {:?}",
            image.shape()
        )));
    }
    stack0(&vec![image.clone(); t])
}

#[inline]
fn fire(v_pre: f32, p: &LifParams) -> (f32, f32) {
    let hard = if v_pre >= p.v_th { 1.0 } else { 0.0 };
    let v_next = match p.reset {
        Reset::Soft => v_pre - p.v_th * hard,
        Reset::Hard => v_pre * (1.0 - hard),
    };
    let out = match p.forward {
        SpikeForward::Hard => hard,
        SpikeForward::Smooth => surrogate_step(v_pre, p),
    };
    (out, v_next)
}

/// One update: charge, threshold, reset.
pub fn lif_step(current: &Tensor, state: &LifState, p: &LifParams) -> Result<(Tensor, LifState)> {
    if current.shape() != state.v.shape() {
        return Err(Error::dim(format!(
            "lif_step: current {:?} vs membrane {:?}",
            current.shape(),
            state.v.shape()
        )));
    }
    let mut spikes = Vec::with_capacity(current.len());
    let mut v = Vec::with_capacity(current.len());
    for (&i, &v0) in current.data().iter().zip(state.v.data()) {
        let (s, vn) = fire(p.beta * v0 + i, p);
        spikes.push(s);
        v.push(vn);
    }
    Ok((
        Tensor::new(current.shape(), spikes)?,
        LifState {
            v: Tensor::new(current.shape(), v)?,
        },
    ))
}

/// Spikes and pre-reset membranes produced by a full sequence.
#[derive(Clone, Debug)]
pub struct LifTrace {
    pub spikes: Tensor,
    /// Membrane after charging and before reset, per step: `[t, c, h, w]`.
    pub v_pre: Tensor,
}

impl LifTrace {
    pub fn firing_rate(&self) -> f32 {
        self.spikes.mean() as f32
    }
}

/// Run the neuron over axis 0 of `currents` from a zero membrane.
pub fn lif_forward(currents: &Tensor, p: &LifParams) -> LifTrace {
    let step = currents.slice_len();
    let t = currents.shape()[0];
    let mut v = vec![0.0f32; step];
    let mut spikes = Vec::with_capacity(currents.len());
    let mut v_pre = Vec::with_capacity(currents.len());
    for k in 0..t {
        let cur = &currents.data()[k * step..(k + 1) * step];
        for (vi, &i) in v.iter_mut().zip(cur) {
            let pre = p.beta * *vi + i;
            let (s, vn) = fire(pre, p);
            debug_assert!(p.forward == SpikeForward::Smooth || s == 0.0 || s == 1.0);
            spikes.push(s);
            v_pre.push(pre);
            *vi = vn;
        }
    }
    LifTrace {
        spikes: Tensor::new(currents.shape(), spikes).expect("spike shape"),
        v_pre: Tensor::new(currents.shape(), v_pre).expect("membrane shape"),
    }
}

/// Backward through time with the surrogate in place of the step and the
/// reset term detached.
pub fn lif_backward(grad_spikes: &Tensor, v_pre: &Tensor, p: &LifParams) -> Tensor {
    let step = v_pre.slice_len();
    let t = v_pre.shape()[0];
    let mut grad_in = vec![0.0f32; v_pre.len()];
    // dL/dv_t carried from step t+1 back to step t
    let mut carry = vec![0.0f32; step];
    for k in (0..t).rev() {
        let range = k * step..(k + 1) * step;
        let gs = &grad_spikes.data()[range.clone()];
        let vp = &v_pre.data()[range.clone()];
        let gi = &mut grad_in[range];
        for j in 0..step {
            let dv_post = match p.reset {
                Reset::Soft => carry[j],
                Reset::Hard => {
                    if vp[j] >= p.v_th {
                        0.0
                    } else {
                        carry[j]
                    }
                }
            };
            let d_pre = gs[j] * surrogate_grad(vp[j], p) + dv_post;
            gi[j] = d_pre;
            carry[j] = p.beta * d_pre;
        }
    }
    Tensor::new(v_pre.shape(), grad_in).expect("gradient shape")
}

/// Spikes, firing rate, and per-step membranes for a `[t, c, h, w]` current.
pub fn lif_sequence(currents: &Tensor, p: &LifParams) -> Result<(Tensor, f32, Tensor)> {
    if currents.shape()[0] == 0 {
        return Err(Error::config("lif_sequence needs at least one time step"));
    }
    p.validate()?;
    let trace = lif_forward(currents, p);
    let fr = trace.firing_rate();
    Ok((trace.spikes, fr, trace.v_pre))
}

pub const HISTOGRAM_BINS: usize = 32;

/// Fraction of membrane samples with `|v| > 0.01 * v_th`.
pub fn voltage_density(v: &Tensor, v_th: f32) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    let thr = 0.01 * v_th;
    v.data().iter().filter(|x| x.abs() > thr).count() as f32 / v.len() as f32
}

/// Membrane histogram over `[-2 v_th, 2 v_th]`; out-of-range samples land in
/// the edge bins.
pub fn membrane_histogram(v: &[f32], v_th: f32) -> [u64; HISTOGRAM_BINS] {
    let mut counts = [0u64; HISTOGRAM_BINS];
    let lo = -2.0 * v_th;
    let width = 4.0 * v_th / HISTOGRAM_BINS as f32;
    for &x in v {
        let b = ((x - lo) / width).floor();
        let b = if b.is_nan() {
            0.0
        } else {
            b.clamp(0.0, (HISTOGRAM_BINS - 1) as f32)
        };
        counts[b as usize] += 1;
    }
    counts
}

/// Per-step histogram rows for one layer's membrane trace `[t, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramRow {
    pub step: usize,
    pub layer: String,
    pub bin_lo: f32,
    pub bin_hi: f32,
    pub count: u64,
}

pub fn histogram_rows(layer: &str, v_trace: &Tensor, v_th: f32) -> Vec<HistogramRow> {
    let step_len = v_trace.slice_len();
    let width = 4.0 * v_th / HISTOGRAM_BINS as f32;
    let mut rows = Vec::new();
    for t in 0..v_trace.shape()[0] {
        let counts = membrane_histogram(&v_trace.data()[t * step_len..(t + 1) * step_len], v_th);
        for (b, &count) in counts.iter().enumerate() {
            rows.push(HistogramRow {
                step: t,
                layer: layer.to_string(),
                bin_lo: -2.0 * v_th + b as f32 * width,
                bin_hi: -2.0 * v_th + (b + 1) as f32 * width,
                count,
            });
        }
    }
    rows
}

/// `step,layer,bin_lo,bin_hi,count` CSV.
pub fn histogram_csv(rows: &[HistogramRow]) -> String {
    let mut out = String::from("step,layer,bin_lo,bin_hi,count\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.layer, r.bin_lo, r.bin_hi, r.count
        );
    }
    out
}
