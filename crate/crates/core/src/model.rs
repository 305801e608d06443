//! Layer graphs for the spiking student and its non-spiking twin.
//!
//! A [`ModelGraph`] is a flat list of layers, each producing one value slot
//! from earlier slots. The U-shaped encoder-decoder used for restoration is
//! built by [`build_student`] / [`build_teacher`]; arbitrary small graphs can
//! be assembled with [`GraphBuilder`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{AttentionParams, Tape, Var};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, SpikeForward};
use crate::tensor::{Shape, Tensor};

/// Tap point of the U-shape: encoder levels first, then the bottleneck, then
/// decoder levels, numbered from 1 in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageId(u8);

impl StageId {
    pub const MAX: u8 = 7;

    pub fn new(id: u8) -> Result<Self> {
        if !(1..=Self::MAX).contains(&id) {
            return Err(Error::config(format!(
                "stage {id} outside 1..={}",
                Self::MAX
            )));
        }
        Ok(StageId(id))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type FeatureTapSet = BTreeMap<StageId, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct StudentConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub timesteps: usize,
    pub lif: LifParams,
    pub kernel: usize,
    pub image_channels: usize,
    /// Temporal/channel/spatial gates after each spiking neuron.
    pub attention: bool,
    /// Start the output convolution at zero so the untrained model is the
    /// identity map.
    pub zero_tail: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            levels: 4,
            channels: vec![8, 16, 32, 64],
            blocks_per_level: 2,
            timesteps: 4,
            lif: LifParams::default(),
            kernel: 3,
            image_channels: 1,
            attention: true,
            zero_tail: true,
        }
    }
}

impl StudentConfig {
    /// Channel widths of the full-size network.
    pub fn full_size() -> Self {
        StudentConfig {
            channels: vec![48, 96, 192, 384],
            ..Default::default()
        }
    }

    pub fn teacher(&self) -> TeacherConfig {
        TeacherConfig {
            levels: self.levels,
            channels: self.channels.clone(),
            blocks_per_level: self.blocks_per_level,
            kernel: self.kernel,
            image_channels: self.image_channels,
            zero_tail: self.zero_tail,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub kernel: usize,
    pub image_channels: usize,
    pub zero_tail: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        StudentConfig::default().teacher()
    }
}

fn validate_shape(
    levels: usize,
    channels: &[usize],
    blocks: usize,
    kernel: usize,
    image_channels: usize,
) -> Result<()> {
    if levels == 0 || channels.len() != levels {
        return Err(Error::config(format!(
            "{levels} levels need {levels} channel counts, got {}",
            channels.len()
        )));
    }
    if 2 * levels - 1 > StageId::MAX as usize {
        return Err(Error::config(format!(
            "at most 4 levels are supported, got {levels}"
        )));
    }
    if channels.contains(&0) || image_channels == 0 {
        return Err(Error::config("channel counts must be >= 1"));
    }
    if blocks == 0 {
        return Err(Error::config("blocks_per_level must be >= 1"));
    }
    if kernel.is_multiple_of(2) {
        return Err(Error::config(format!("kernel size {kernel} must be odd")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replace every tensor, keeping names. Shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (e, v) in self.entries.iter().zip(&values) {
            if e.value.shape() != v.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    e.name,
                    e.value.shape(),
                    v.shape()
                )));
            }
        }
        for (e, v) in self.entries.iter_mut().zip(values) {
            e.value = v;
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Whether a value carries analog magnitudes or (possibly gated) spikes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Analog,
    Spike,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Input,
    /// Replicate the image over the time axis.
    Encode {
        timesteps: usize,
    },
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    },
    Norm {
        scale: ParamId,
        shift: ParamId,
    },
    Lif,
    Relu,
    Attention {
        time: ParamId,
        chan_w: ParamId,
        chan_b: ParamId,
        space_w: ParamId,
        space_b: ParamId,
    },
    Upsample2x,
    Add,
    TimeMean,
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Input => "input",
            LayerOp::Encode { .. } => "encode",
            LayerOp::Conv { .. } => "conv",
            LayerOp::Norm { .. } => "norm",
            LayerOp::Lif => "lif",
            LayerOp::Relu => "relu",
            LayerOp::Attention { .. } => "attention",
            LayerOp::Upsample2x => "upsample",
            LayerOp::Add => "add",
            LayerOp::TimeMean => "time_mean",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<usize>,
    pub stage: Option<StageId>,
    pub kind: ValueKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NetKind {
    Spiking { timesteps: usize, lif: LifParams },
    Analog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub net: NetKind,
    pub image_channels: usize,
    /// Spatial extents must be divisible by this; others are reflect-padded.
    pub spatial_multiple: usize,
    layers: Vec<Layer>,
    output: usize,
    params: ParamStore,
}

/// Assembles a [`ModelGraph`] layer by layer. Slot 0 is the input image.
pub struct GraphBuilder {
    layers: Vec<Layer>,
    params: ParamStore,
    rng: ChaCha8Rng,
    image_channels: usize,
}

impl GraphBuilder {
    pub fn new(image_channels: usize, seed: u64) -> Self {
        GraphBuilder {
            layers: vec![Layer {
                name: "input".into(),
                op: LayerOp::Input,
                inputs: vec![],
                stage: None,
                kind: ValueKind::Analog,
            }],
            params: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            image_channels,
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    fn push(
        &mut self,
        name: impl Into<String>,
        op: LayerOp,
        inputs: Vec<usize>,
        kind: ValueKind,
    ) -> usize {
        self.layers.push(Layer {
            name: name.into(),
            op,
            inputs,
            stage: None,
            kind,
        });
        self.layers.len() - 1
    }

    pub fn kind(&self, slot: usize) -> ValueKind {
        self.layers[slot].kind
    }

    pub fn encode(&mut self, x: usize, timesteps: usize) -> usize {
        self.push(
            "encode",
            LayerOp::Encode { timesteps },
            vec![x],
            ValueKind::Analog,
        )
    }

    /// Same-padded convolution with Kaiming-uniform weights and zero bias.
    pub fn conv(
        &mut self,
        name: &str,
        x: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> usize {
        let fan_in = (c_in * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn([c_out, c_in, kernel, kernel], |_| {
            rng.random_range(-bound..bound)
        });
        let weight = self.params.push(format!("{name}.weight"), w);
        let bias = self
            .params
            .push(format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1]));
        self.push(
            name,
            LayerOp::Conv {
                weight,
                bias: Some(bias),
                c_in,
                c_out,
                kernel,
                stride,
            },
            vec![x],
            ValueKind::Analog,
        )
    }

    /// Per-channel standardisation with a learnable affine.
    pub fn norm(&mut self, name: &str, x: usize, c: usize) -> usize {
        let scale = self
            .params
            .push(format!("{name}.scale"), Tensor::full([1, c, 1, 1], 1.0));
        let shift = self
            .params
            .push(format!("{name}.shift"), Tensor::zeros([1, c, 1, 1]));
        self.push(
            name,
            LayerOp::Norm { scale, shift },
            vec![x],
            ValueKind::Analog,
        )
    }

    pub fn lif(&mut self, name: &str, x: usize) -> usize {
        self.push(name, LayerOp::Lif, vec![x], ValueKind::Spike)
    }

    pub fn relu(&mut self, name: &str, x: usize) -> usize {
        self.push(name, LayerOp::Relu, vec![x], ValueKind::Analog)
    }

    /// Gates start near fully open (sigmoid(3) ~ 0.95) with zero weights.
    pub fn attention(&mut self, name: &str, spikes: usize, c: usize) -> usize {
        let time = self
            .params
            .push(format!("{name}.time"), Tensor::vector(vec![0.0, 3.0]));
        let chan_w = self
            .params
            .push(format!("{name}.chan_w"), Tensor::zeros([1, c, 1, 1]));
        let chan_b = self
            .params
            .push(format!("{name}.chan_b"), Tensor::full([1, c, 1, 1], 3.0));
        let space_w = self
            .params
            .push(format!("{name}.space_w"), Tensor::zeros([1, c, 1, 1]));
        let space_b = self
            .params
            .push(format!("{name}.space_b"), Tensor::scalar(3.0));
        let kind = self.kind(spikes);
        self.push(
            name,
            LayerOp::Attention {
                time,
                chan_w,
                chan_b,
                space_w,
                space_b,
            },
            vec![spikes],
            kind,
        )
    }

    pub fn upsample(&mut self, name: &str, x: usize) -> usize {
        self.push(name, LayerOp::Upsample2x, vec![x], ValueKind::Analog)
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> usize {
        let kind = if self.kind(a) == ValueKind::Spike && self.kind(b) == ValueKind::Spike {
            ValueKind::Spike
        } else {
            ValueKind::Analog
        };
        self.push(name, LayerOp::Add, vec![a, b], kind)
    }

    pub fn time_mean(&mut self, name: &str, x: usize) -> usize {
        self.push(name, LayerOp::TimeMean, vec![x], ValueKind::Analog)
    }

    pub fn tap(&mut self, slot: usize, stage: StageId) {
        self.layers[slot].stage = Some(stage);
    }

    /// Zero a parameter by name (used for the zero-initialised output head).
    pub fn zero_param(&mut self, name: &str) {
        if let Some(t) = self.params.by_name_mut(name) {
            t.data_mut().fill(0.0);
        }
    }

    pub fn finish(self, net: NetKind, output: usize, spatial_multiple: usize) -> ModelGraph {
        ModelGraph {
            net,
            image_channels: self.image_channels,
            spatial_multiple,
            layers: self.layers,
            output,
            params: self.params,
        }
    }
}

#[derive(Clone, Copy)]
enum Flavor {
    Spiking { attention: bool },
    Analog,
}

struct UShape<'a> {
    levels: usize,
    channels: &'a [usize],
    blocks: usize,
    kernel: usize,
    image_channels: usize,
    zero_tail: bool,
}

fn block(
    b: &mut GraphBuilder,
    name: &str,
    x: usize,
    c_in: usize,
    c: usize,
    kernel: usize,
    flavor: Flavor,
) -> usize {
    let conv = b.conv(&format!("{name}.conv"), x, c_in, c, kernel, 1);
    let norm = b.norm(&format!("{name}.norm"), conv, c);
    match flavor {
        Flavor::Spiking { attention } => {
            let s = b.lif(&format!("{name}.lif"), norm);
            if attention {
                b.attention(&format!("{name}.attn"), s, c)
            } else {
                s
            }
        }
        Flavor::Analog => b.relu(&format!("{name}.relu"), norm),
    }
}

/// Normalise and re-activate an analog value so the next convolution sees spikes.
fn fire(b: &mut GraphBuilder, name: &str, x: usize, c: usize, flavor: Flavor) -> usize {
    let norm = b.norm(&format!("{name}.norm"), x, c);
    match flavor {
        Flavor::Spiking { .. } => b.lif(&format!("{name}.lif"), norm),
        Flavor::Analog => b.relu(&format!("{name}.relu"), norm),
    }
}

fn build_ushape(u: &UShape<'_>, flavor: Flavor, net: NetKind, seed: u64) -> Result<ModelGraph> {
    validate_shape(u.levels, u.channels, u.blocks, u.kernel, u.image_channels)?;
    let mut b = GraphBuilder::new(u.image_channels, seed);
    let levels = u.levels;
    let mut x = b.input();
    if let NetKind::Spiking { timesteps, .. } = net {
        x = b.encode(x, timesteps);
    }
    let k = u.kernel;
    x = b.conv("head", x, u.image_channels, u.channels[0], k, 1);
    x = fire(&mut b, "head", x, u.channels[0], flavor);
    let mut c_prev = u.channels[0];
    let mut skips = Vec::with_capacity(levels);
    for level in 0..levels {
        let c = u.channels[level];
        let prefix = if level + 1 == levels {
            "mid".to_string()
        } else {
            format!("enc{}", level + 1)
        };
        for i in 0..u.blocks {
            x = block(
                &mut b,
                &format!("{prefix}.b{}", i + 1),
                x,
                c_prev,
                c,
                k,
                flavor,
            );
            c_prev = c;
        }
        b.tap(x, StageId::new((level + 1) as u8)?);
        if level + 1 < levels {
            skips.push(x);
            x = b.conv(&format!("{prefix}.down"), x, c, u.channels[level + 1], k, 2);
            x = fire(
                &mut b,
                &format!("{prefix}.down"),
                x,
                u.channels[level + 1],
                flavor,
            );
            c_prev = u.channels[level + 1];
        }
    }
    for level in (0..levels - 1).rev() {
        let c = u.channels[level];
        let prefix = format!("dec{}", level + 1);
        let proj = b.conv(&format!("{prefix}.proj"), x, c_prev, c, k, 1);
        let up = b.upsample(&format!("{prefix}.up"), proj);
        let sum = b.add(&format!("{prefix}.skip"), up, skips[level]);
        x = fire(&mut b, &format!("{prefix}.skip"), sum, c, flavor);
        c_prev = c;
        for i in 0..u.blocks {
            x = block(&mut b, &format!("{prefix}.b{}", i + 1), x, c, c, k, flavor);
        }
        b.tap(x, StageId::new((2 * levels - 1 - level) as u8)?);
    }
    if matches!(net, NetKind::Spiking { .. }) {
        x = b.time_mean("readout", x);
    }
    let tail = b.conv("tail", x, c_prev, u.image_channels, k, 1);
    if u.zero_tail {
        b.zero_param("tail.weight");
        b.zero_param("tail.bias");
    }
    let input = b.input();
    let out = b.add("residual", tail, input);
    Ok(b.finish(net, out, 1 << (levels - 1)))
}

pub fn build_student(cfg: &StudentConfig, seed: u64) -> Result<ModelGraph> {
    if cfg.timesteps == 0 {
        return Err(Error::config("timesteps must be >= 1"));
    }
    cfg.lif.validate()?;
    build_ushape(
        &UShape {
            levels: cfg.levels,
            channels: &cfg.channels,
            blocks: cfg.blocks_per_level,
            kernel: cfg.kernel,
            image_channels: cfg.image_channels,
            zero_tail: cfg.zero_tail,
        },
        Flavor::Spiking {
            attention: cfg.attention,
        },
        NetKind::Spiking {
            timesteps: cfg.timesteps,
            lif: cfg.lif,
        },
        seed,
    )
}

pub fn build_teacher(cfg: &TeacherConfig, seed: u64) -> Result<ModelGraph> {
    build_ushape(
        &UShape {
            levels: cfg.levels,
            channels: &cfg.channels,
            blocks: cfg.blocks_per_level,
            kernel: cfg.kernel,
            image_channels: cfg.image_channels,
            zero_tail: cfg.zero_tail,
        },
        Flavor::Analog,
        NetKind::Analog,
        seed,
    )
}

/// Per-forward measurements used by the trainer and the energy profiler.
#[derive(Clone, Debug, Default)]
pub struct ForwardStats {
    /// Output shape of every slot.
    pub shapes: Vec<Shape>,
    /// Fraction of non-zero entries for every spike-valued slot.
    pub activity: BTreeMap<usize, f32>,
    /// `(layer name, firing rate)` for each neuron layer in graph order.
    pub firing_rates: Vec<(String, f32)>,
    /// `(layer name, pre-reset membrane trace)` for each neuron layer.
    pub membranes: Vec<(String, Tensor)>,
}

impl ForwardStats {
    pub fn mean_firing_rate(&self) -> f32 {
        if self.firing_rates.is_empty() {
            return 0.0;
        }
        self.firing_rates.iter().map(|(_, r)| r).sum::<f32>() / self.firing_rates.len() as f32
    }

    /// Fraction of membrane samples with `|v| > 0.01 v_th` across all layers.
    pub fn voltage_density(&self, v_th: f32) -> f32 {
        let thr = 0.01 * v_th;
        let (mut hit, mut total) = (0usize, 0usize);
        for (_, v) in &self.membranes {
            hit += v.data().iter().filter(|x| x.abs() > thr).count();
            total += v.len();
        }
        if total == 0 {
            0.0
        } else {
            hit as f32 / total as f32
        }
    }
}

/// Values of one forward pass recorded on a tape.
pub struct TapeForward {
    pub slots: Vec<Var>,
    pub output: Var,
    /// Stage taps; spiking taps are averaged over time.
    pub taps: BTreeMap<StageId, Var>,
    pub params: Vec<Var>,
    /// Reflect padding added at the bottom/right, cropped from `output`.
    pub pad: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub restored: Tensor,
    pub taps: FeatureTapSet,
    pub stats: ForwardStats,
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn reflect_pad(x: &Tensor, ph: usize, pw: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h + ph, w + pw], |[b, ch, y, xx]| {
        x.at([b, ch, reflect(y, h), reflect(xx, w)])
    })
}

fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = x.shape();
    Tensor::from_fn([n, c, h, w], |[b, ch, y, xx]| x.at([b, ch, y, xx]))
}

impl ModelGraph {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn output_slot(&self) -> usize {
        self.output
    }

    pub fn stages(&self) -> Vec<StageId> {
        self.layers.iter().filter_map(|l| l.stage).collect()
    }

    pub fn timesteps(&self) -> usize {
        match self.net {
            NetKind::Spiking { timesteps, .. } => timesteps,
            NetKind::Analog => 1,
        }
    }

    pub fn is_spiking(&self) -> bool {
        matches!(self.net, NetKind::Spiking { .. })
    }

    /// Override the spike nonlinearity's forward behaviour.
    pub fn set_spike_forward(&mut self, forward: SpikeForward) {
        if let NetKind::Spiking { lif, .. } = &mut self.net {
            lif.forward = forward;
        }
    }

    pub fn lif_params(&self) -> Option<LifParams> {
        match self.net {
            NetKind::Spiking { lif, .. } => Some(lif),
            NetKind::Analog => None,
        }
    }

    /// Record a forward pass of the `[1, c, h, w]` value `x` on `tape`.
    /// Parameters are trainable leaves when `trainable`, constants otherwise.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        trainable: bool,
    ) -> Result<(TapeForward, ForwardStats)> {
        let [n, c, h, w] = image.shape();
        if n != 1 || c != self.image_channels {
            return Err(Error::dim(format!(
                "model expects [1, {}, h, w], got {:?}",
                self.image_channels,
                image.shape()
            )));
        }
        let m = self.spatial_multiple;
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let input = if ph > 0 || pw > 0 {
            reflect_pad(image, ph, pw)
        } else {
            image.clone()
        };
        let params: Vec<Var> = self
            .params
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        let p = |id: ParamId| params[id.0];
        let mut slots: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut stats = ForwardStats::default();
        let lif = self.lif_params();
        for (i, layer) in self.layers.iter().enumerate() {
            let arg = |k: usize| slots[layer.inputs[k]];
            let v = match &layer.op {
                LayerOp::Input => tape.constant(input.clone()),
                LayerOp::Encode { timesteps } => tape.repeat0(arg(0), *timesteps)?,
                LayerOp::Conv {
                    weight,
                    bias,
                    kernel,
                    stride,
                    ..
                } => tape.conv2d(arg(0), p(*weight), bias.map(p), *stride, kernel / 2)?,
                LayerOp::Norm { scale, shift } => {
                    tape.channel_norm(arg(0), p(*scale), p(*shift))?
                }
                LayerOp::Lif => {
                    let lp =
                        lif.ok_or_else(|| Error::contract("neuron layer in a non-spiking graph"))?;
                    let s = tape.lif(arg(0), lp)?;
                    let fr = tape.value(s).mean() as f32;
                    stats.firing_rates.push((layer.name.clone(), fr));
                    stats.membranes.push((
                        layer.name.clone(),
                        tape.membrane(s)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros([0, 0, 0, 0])),
                    ));
                    s
                }
                LayerOp::Relu => tape.relu(arg(0))?,
                LayerOp::Attention {
                    time,
                    chan_w,
                    chan_b,
                    space_w,
                    space_b,
                } => {
                    let src = arg(0);
                    let membrane = tape.membrane(src).cloned().ok_or_else(|| {
                        Error::contract(format!(
                            "{}: attention must follow a neuron layer",
                            layer.name
                        ))
                    })?;
                    tape.attention(
                        src,
                        &membrane,
                        AttentionParams {
                            time: p(*time),
                            chan_w: p(*chan_w),
                            chan_b: p(*chan_b),
                            space_w: p(*space_w),
                            space_b: p(*space_b),
                        },
                    )?
                }
                LayerOp::Upsample2x => {
                    let [_, _, h, w] = tape.shape(arg(0));
                    tape.resize(arg(0), 2 * h, 2 * w)?
                }
                LayerOp::Add => tape.add(arg(0), arg(1))?,
                LayerOp::TimeMean => tape.reduce_mean(arg(0), 0)?,
            };
            stats.shapes.push(tape.shape(v));
            if layer.kind == ValueKind::Spike {
                let val = tape.value(v);
                let nz = val.data().iter().filter(|&&x| x != 0.0).count();
                stats
                    .activity
                    .insert(i, nz as f32 / val.len().max(1) as f32);
            }
            slots.push(v);
        }
        let mut taps = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(stage) = layer.stage {
                let v = if self.is_spiking() {
                    tape.reduce_mean(slots[i], 0)?
                } else {
                    slots[i]
                };
                taps.insert(stage, v);
            }
        }
        let output = slots[self.output];
        Ok((
            TapeForward {
                slots,
                output,
                taps,
                params,
                pad: (ph, pw),
            },
            stats,
        ))
    }

    /// Inference: restored image, stage taps, and activity statistics.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let (fwd, stats) = self.forward_tape(&mut tape, image, false)?;
        let [_, _, h, w] = image.shape();
        let out = tape.value(fwd.output);
        let restored = if fwd.pad != (0, 0) {
            crop(out, h, w)
        } else {
            out.clone()
        };
        let taps = fwd
            .taps
            .iter()
            .map(|(&s, &v)| (s, tape.value(v).clone()))
            .collect();
        Ok(ForwardOutput {
            restored,
            taps,
            stats,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Text table of layers for an `h x w` input.
    pub fn summary(&self, h: usize, w: usize) -> Result<String> {
        let probe = Tensor::zeros([1, self.image_channels, h, w]);
        let mut tape = Tape::new();
        let (_, stats) = self.forward_tape(&mut tape, &probe, false)?;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<4} {:<18} {:<10} {:<6} {:<20} {:>8}",
            "#", "layer", "kind", "stage", "output shape", "params"
        );
        for (i, l) in self.layers.iter().enumerate() {
            let params = self
                .layer_param_ids(l)
                .iter()
                .map(|&id| self.params.get(id).len())
                .sum::<usize>();
            let stage = l.stage.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
            let s = stats.shapes[i];
            let _ = writeln!(
                out,
                "{:<4} {:<18} {:<10} {:<6} {:<20} {:>8}",
                i,
                l.name,
                l.op.kind_name(),
                stage,
                format!("[{}, {}, {}, {}]", s[0], s[1], s[2], s[3]),
                params
            );
        }
        let _ = writeln!(out, "total parameters: {}", self.param_count());
        Ok(out)
    }

    pub fn layer_param_ids(&self, l: &Layer) -> Vec<ParamId> {
        match &l.op {
            LayerOp::Conv { weight, bias, .. } => std::iter::once(*weight).chain(*bias).collect(),
            LayerOp::Norm { scale, shift } => vec![*scale, *shift],
            LayerOp::Attention {
                time,
                chan_w,
                chan_b,
                space_w,
                space_b,
            } => vec![*time, *chan_w, *chan_b, *space_w, *space_b],
            _ => vec![],
        }
    }
}

/// Learnable scalar count of a graph (zero for an empty one).
pub fn param_count(g: &ModelGraph) -> usize {
    g.param_count()
}
