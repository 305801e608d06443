//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction. [`Tape::backward`] walks it once in reverse and accumulates
//! gradients additively wherever a value fans out.

// Index loops over (time, channel) mirror the tensor layout in the gate maths.
#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::fft;
use crate::neuron::{self, LifParams};
use crate::tensor::{self, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        cols: Option<tensor::ConvCols>,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Abs(Var),
    Square(Var),
    MeanAll(Var),
    ReduceMean {
        x: Var,
        axis: usize,
    },
    Repeat0 {
        x: Var,
    },
    Resize {
        x: Var,
    },
    ChannelPool {
        x: Var,
    },
    Rdft2 {
        x: Var,
    },
    ChannelNorm {
        x: Var,
        scale: Var,
        shift: Var,
        normalized: Tensor,
        inv_std: Vec<f32>,
    },
    Lif {
        x: Var,
        params: LifParams,
        v_pre: Tensor,
    },
    Attention(Box<AttentionNode>),
}

#[derive(Clone, Debug)]
struct AttentionNode {
    x: Var,
    params: AttentionParams,
    /// Detached gate statistics.
    membrane_mean: Vec<f32>,
    channel_rate: Vec<f32>,
    spike_mean: Tensor,
    /// Gate values.
    g_time: Vec<f32>,
    g_chan: Vec<f32>,
    g_space: Vec<f32>,
}

/// Parameters of the three multiplicative gates of a spiking block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// `[1, 1, 1, 2]`: weight and bias of the temporal gate.
    pub time: Var,
    /// `[1, c, 1, 1]` per-channel weights of the channel gate.
    pub chan_w: Var,
    /// `[1, c, 1, 1]` per-channel biases of the channel gate.
    pub chan_b: Var,
    /// `[1, c, 1, 1]` 1x1 projection of the spatial gate.
    pub space_w: Var,
    /// `[1, 1, 1, 1]` bias of the spatial gate.
    pub space_b: Var,
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; absent for values that do not need one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Variance floor of [`Tape::channel_norm`].
pub const NORM_EPS: f32 = 1e-5;

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (out, cols) = tensor::conv2d_cols(
            self.value(x),
            self.value(w),
            bias.as_deref(),
            stride,
            padding,
        )?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                cols: rg.then_some(cols),
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = tensor::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let out = tensor::scale(self.value(x), s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f32::abs);
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    /// Mean of every element, as a `[1, 1, 1, 1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s: f32 = v.data().iter().sum();
        let out = Tensor::scalar(s / v.len() as f32);
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanAll(x), rg)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::reduce_mean(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ReduceMean { x, axis }, rg)
    }

    /// Repeat a `[1, c, h, w]` value `t` times along axis 0.
    pub fn repeat0(&mut self, x: Var, t: usize) -> Result<Var> {
        let out = neuron::encode_direct(self.value(x), t)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Repeat0 { x }, rg)
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = tensor::bilinear_resize(self.value(x), h, w)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Resize { x }, rg)
    }

    pub fn channel_pool(&mut self, x: Var, c: usize) -> Result<Var> {
        let out = tensor::channel_avg_pool(self.value(x), c)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ChannelPool { x }, rg)
    }

    /// Half-spectrum DFT with real and imaginary parts interleaved along the
    /// last axis (`[n, c, h, 2 * (w / 2 + 1)]`).
    pub fn rdft2(&mut self, x: Var) -> Result<Var> {
        let out = fft::rdft2(self.value(x))?.interleaved();
        let rg = self.rg(&[x]);
        self.push(out, Op::Rdft2 { x }, rg)
    }

    /// Per-channel standardisation over `(n, h, w)` followed by a learnable
    /// affine: `y = scale[c] * (x - mean_c) / sqrt(var_c + eps) + shift[c]`.
    pub fn channel_norm(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (sv, bv) = (self.value(scale), self.value(shift));
        if sv.len() != c || bv.len() != c {
            return Err(Error::dim(format!(
                "channel_norm: {c} channels but {} scales / {} shifts",
                sv.len(),
                bv.len()
            )));
        }
        let hw = h * w;
        let count = (n * hw) as f32;
        let mut normalized = xv.data().to_vec();
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f32;
            for b in 0..n {
                sum += xv.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .sum::<f32>();
            }
            let mean = sum / count;
            let mut var = 0.0f32;
            for b in 0..n {
                for &v in &xv.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    var += (v - mean) * (v - mean);
                }
            }
            let istd = 1.0 / (var / count + NORM_EPS).sqrt();
            inv_std[ch] = istd;
            for b in 0..n {
                for v in &mut normalized[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    *v = (*v - mean) * istd;
                }
            }
        }
        let mut out = normalized.clone();
        for b in 0..n {
            for ch in 0..c {
                let (s, t) = (sv.data()[ch], bv.data()[ch]);
                for o in &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    *o = *o * s + t;
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let normalized = Tensor::new(xv.shape(), normalized)?;
        let rg = self.rg(&[x, scale, shift]);
        self.push(
            out,
            Op::ChannelNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    /// Leaky integrate-and-fire over axis 0 with surrogate backward.
    pub fn lif(&mut self, x: Var, params: LifParams) -> Result<Var> {
        params.validate()?;
        let trace = neuron::lif_forward(self.value(x), &params);
        let rg = self.rg(&[x]);
        self.push(
            trace.spikes,
            Op::Lif {
                x,
                params,
                v_pre: trace.v_pre,
            },
            rg,
        )
    }

    /// Pre-reset membrane trace recorded by a [`Tape::lif`] node.
    pub fn membrane(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Lif { v_pre, .. } => Some(v_pre),
            _ => None,
        }
    }

    /// Temporal, channel, and spatial sigmoid gates multiplied onto `x`.
    ///
    /// Gate inputs (per-step mean membrane, per-channel spike rate, time-mean
    /// spikes) are treated as constants; gradients reach `x` through the
    /// multiplicative path and the gate parameters.
    pub fn attention(&mut self, x: Var, membrane: &Tensor, params: AttentionParams) -> Result<Var> {
        let xv = self.value(x);
        let [t, c, h, w] = xv.shape();
        if membrane.shape() != xv.shape() {
            return Err(Error::dim(
                "attention: membrane trace does not match spikes",
            ));
        }
        let tp = self.value(params.time).data();
        let (cw, cb) = (
            self.value(params.chan_w).data(),
            self.value(params.chan_b).data(),
        );
        let (sw, sb) = (
            self.value(params.space_w).data(),
            self.value(params.space_b).data(),
        );
        if tp.len() != 2 || cw.len() != c || cb.len() != c || sw.len() != c || sb.len() != 1 {
            return Err(Error::dim(format!(
                "attention: gate parameters do not match {c} channels"
            )));
        }
        let hw = h * w;
        let step = c * hw;
        let membrane_mean: Vec<f32> = (0..t)
            .map(|k| {
                membrane.data()[k * step..(k + 1) * step]
                    .iter()
                    .sum::<f32>()
                    / step as f32
            })
            .collect();
        let spike_mean = tensor::reduce_mean(xv, 0)?;
        let channel_rate: Vec<f32> = (0..c)
            .map(|ch| {
                spike_mean.data()[ch * hw..(ch + 1) * hw]
                    .iter()
                    .sum::<f32>()
                    / hw as f32
            })
            .collect();
        let g_time: Vec<f32> = membrane_mean
            .iter()
            .map(|&m| sigmoid(tp[0] * m + tp[1]))
            .collect();
        let g_chan: Vec<f32> = (0..c)
            .map(|ch| sigmoid(cw[ch] * channel_rate[ch] + cb[ch]))
            .collect();
        let mut g_space = vec![sb[0]; hw];
        for ch in 0..c {
            let plane = &spike_mean.data()[ch * hw..(ch + 1) * hw];
            for (g, &s) in g_space.iter_mut().zip(plane) {
                *g += sw[ch] * s;
            }
        }
        for g in g_space.iter_mut() {
            *g = sigmoid(*g);
        }
        let mut out = xv.data().to_vec();
        for k in 0..t {
            for ch in 0..c {
                let gtc = g_time[k] * g_chan[ch];
                let base = k * step + ch * hw;
                for (o, &gs) in out[base..base + hw].iter_mut().zip(&g_space) {
                    *o *= gtc * gs;
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[
            x,
            params.time,
            params.chan_w,
            params.chan_b,
            params.space_w,
            params.space_b,
        ]);
        self.push(
            out,
            Op::Attention(Box::new(AttentionNode {
                x,
                params,
                membrane_mean,
                channel_rate,
                spike_mean,
                g_time,
                g_chan,
                g_space,
            })),
            rg,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
                cols,
            } => {
                let need_x = self.requires_grad(*x);
                let cg = match cols {
                    Some(c) => tensor::conv2d_backward_cols(c, self.value(*w), g, need_x)?,
                    None => tensor::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        g,
                        *stride,
                        *padding,
                        need_x,
                    )?,
                };
                if let Some(gx) = cg.input {
                    send(*x, gx, grads);
                }
                send(*w, cg.kernel, grads);
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    send(*b, Tensor::new(shape, cg.bias)?, grads);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 })
                    .collect();
                send(*x, Tensor::new(xv.shape(), d)?, grads);
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, tensor::scale(g, -1.0), grads);
            }
            Op::Mul(a, b) => {
                send(*a, tensor::mul(g, self.value(*b))?, grads);
                send(*b, tensor::mul(g, self.value(*a))?, grads);
            }
            Op::Scale(x, s) => send(*x, tensor::scale(g, *s), grads),
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| {
                        if a > 0.0 {
                            gv
                        } else if a < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*x, Tensor::new(xv.shape(), d)?, grads);
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| 2.0 * a * gv)
                    .collect();
                send(*x, Tensor::new(xv.shape(), d)?, grads);
            }
            Op::MeanAll(x) => {
                let shape = self.shape(*x);
                let n = tensor::numel(&shape);
                send(*x, Tensor::full(shape, g.data()[0] / n as f32), grads);
            }
            Op::ReduceMean { x, axis } => {
                send(
                    *x,
                    tensor::reduce_mean_backward(g, self.shape(*x), *axis),
                    grads,
                );
            }
            Op::Repeat0 { x } => {
                let [t, ..] = g.shape();
                let mut acc = Tensor::zeros(self.shape(*x));
                let len = acc.len();
                for k in 0..t {
                    for (a, b) in acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[k * len..(k + 1) * len])
                    {
                        *a += b;
                    }
                }
                send(*x, acc, grads);
            }
            Op::Resize { x } => {
                send(
                    *x,
                    tensor::bilinear_resize_backward(g, self.shape(*x)),
                    grads,
                );
            }
            Op::ChannelPool { x } => {
                send(
                    *x,
                    tensor::channel_avg_pool_backward(g, self.shape(*x)),
                    grads,
                );
            }
            Op::Rdft2 { x } => {
                let [n, c, h, w2] = g.shape();
                let wh = w2 / 2;
                let (re, im): (Vec<f32>, Vec<f32>) =
                    g.data().chunks_exact(2).map(|p| (p[0], p[1])).unzip();
                let gx = fft::rdft2_adjoint(&re, &im, [n, c, h, wh], self.shape(*x)[3])?;
                send(*x, gx, grads);
            }
            Op::ChannelNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let [n, c, h, w] = normalized.shape();
                let hw = h * w;
                let count = (n * hw) as f32;
                let sv = self.value(*scale).data();
                let (gd, xh) = (g.data(), normalized.data());
                let mut gs = vec![0.0f32; c];
                let mut gb = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        gs[ch] += tensor::dot(&gd[r.clone()], &xh[r.clone()]);
                        gb[ch] += gd[r].iter().sum::<f32>();
                    }
                }
                if self.requires_grad(*x) {
                    // dx = scale * inv_std * (g - mean(g) - xhat * mean(g * xhat))
                    let mut gx = vec![0.0f32; gd.len()];
                    for ch in 0..c {
                        let mean_g = gb[ch] / count;
                        let mean_gx = gs[ch] / count;
                        let k = sv[ch] * inv_std[ch];
                        for b in 0..n {
                            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                            for j in r {
                                gx[j] = k * (gd[j] - mean_g - xh[j] * mean_gx);
                            }
                        }
                    }
                    send(*x, Tensor::new([n, c, h, w], gx)?, grads);
                }
                send(*scale, Tensor::new(self.shape(*scale), gs)?, grads);
                send(*shift, Tensor::new(self.shape(*shift), gb)?, grads);
            }
            Op::Lif { x, params, v_pre } => {
                send(*x, neuron::lif_backward(g, v_pre, params), grads);
            }
            Op::Attention(a) => self.backprop_attention(a, g, grads)?,
        }
        Ok(())
    }

    fn backprop_attention(
        &self,
        a: &AttentionNode,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(a.x);
        let [t, c, h, w] = xv.shape();
        let hw = h * w;
        let step = c * hw;
        let mut gx = vec![0.0f32; xv.len()];
        let mut d_time = vec![0.0f32; t];
        let mut d_chan = vec![0.0f32; c];
        let mut d_space = vec![0.0f32; hw];
        for k in 0..t {
            for ch in 0..c {
                let base = k * step + ch * hw;
                let gtc = a.g_time[k] * a.g_chan[ch];
                let gp = &g.data()[base..base + hw];
                let xp = &xv.data()[base..base + hw];
                let mut acc = 0.0f32;
                for j in 0..hw {
                    let gx_j = gp[j] * xp[j];
                    gx[base + j] = gp[j] * gtc * a.g_space[j];
                    acc += gx_j * a.g_space[j];
                    d_space[j] += gx_j * gtc;
                }
                d_time[k] += acc * a.g_chan[ch];
                d_chan[ch] += acc * a.g_time[k];
            }
        }
        if self.requires_grad(a.x) {
            accumulate(&mut grads[a.x.0], Tensor::new(xv.shape(), gx)?);
        }
        let mut g_tp = [0.0f32; 2];
        for k in 0..t {
            let z = d_time[k] * a.g_time[k] * (1.0 - a.g_time[k]);
            g_tp[0] += z * a.membrane_mean[k];
            g_tp[1] += z;
        }
        let mut g_cw = vec![0.0f32; c];
        let mut g_cb = vec![0.0f32; c];
        for ch in 0..c {
            let z = d_chan[ch] * a.g_chan[ch] * (1.0 - a.g_chan[ch]);
            g_cw[ch] = z * a.channel_rate[ch];
            g_cb[ch] = z;
        }
        let z_space: Vec<f32> = (0..hw)
            .map(|j| d_space[j] * a.g_space[j] * (1.0 - a.g_space[j]))
            .collect();
        let g_sw: Vec<f32> = (0..c)
            .map(|ch| tensor::dot(&z_space, &a.spike_mean.data()[ch * hw..(ch + 1) * hw]))
            .collect();
        let g_sb: f32 = z_space.iter().sum();
        let p = &a.params;
        for (var, data) in [
            (p.time, g_tp.to_vec()),
            (p.chan_w, g_cw),
            (p.chan_b, g_cb),
            (p.space_w, g_sw),
            (p.space_b, vec![g_sb]),
        ] {
            if self.requires_grad(var) {
                accumulate(&mut grads[var.0], Tensor::new(self.shape(var), data)?);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(_) => "relu",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Abs(_) => "abs",
        Op::Square(_) => "square",
        Op::MeanAll(_) => "mean",
        Op::ReduceMean { .. } => "reduce_mean",
        Op::Repeat0 { .. } => "repeat",
        Op::Resize { .. } => "bilinear_resize",
        Op::ChannelPool { .. } => "channel_avg_pool",
        Op::Rdft2 { .. } => "rdft2",
        Op::ChannelNorm { .. } => "channel_norm",
        Op::Lif { .. } => "lif",
        Op::Attention(_) => "attention",
    }
}
