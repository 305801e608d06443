//! Operation counting and the firing-rate energy model
//! `E_b = T * (fr * E_AC * OP_AC + E_MAC * OP_MAC)`, summed over blocks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Layer, LayerOp, ModelGraph, ValueKind};
use crate::tensor::{Shape, Tensor};

/// Per-operation energies of 32-bit floating-point arithmetic at 45 nm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            e_mac_pj: 4.6,
            e_ac_pj: 0.9,
        }
    }
}

/// Operation counts of one block for a single time step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockOpCount {
    pub block: String,
    pub op_ac: u64,
    pub op_mac: u64,
}

fn elems(s: &Shape) -> u64 {
    (s[1] * s[2] * s[3]) as u64
}

/// Count one time step of `layer` given its input and output shapes.
///
/// Convolutions on spike inputs are accumulate-only; on analog inputs every
/// synaptic operation is a multiply-accumulate. Bias additions are
/// accumulates. Normalisation, attention gating, neuron integration and
/// interpolation are multiply-accumulates.
pub fn count_ops(
    layer: &Layer,
    in_shape: Shape,
    out_shape: Shape,
    input: ValueKind,
) -> Result<BlockOpCount> {
    let (mut ac, mut mac) = (0u64, 0u64);
    match &layer.op {
        LayerOp::Input | LayerOp::Encode { .. } | LayerOp::Relu => {}
        LayerOp::Conv {
            c_in, kernel, bias, ..
        } => {
            let synaptic = elems(&out_shape) * (*c_in * kernel * kernel) as u64;
            match input {
                ValueKind::Spike => ac += synaptic,
                ValueKind::Analog => mac += synaptic,
            }
            if bias.is_some() {
                ac += elems(&out_shape);
            }
        }
        LayerOp::Norm { .. } | LayerOp::Lif => mac += elems(&out_shape),
        LayerOp::Attention { .. } => mac += 2 * elems(&out_shape),
        LayerOp::Upsample2x => mac += 4 * elems(&out_shape),
        LayerOp::Add => ac += elems(&out_shape),
        LayerOp::TimeMean => ac += elems(&in_shape),
    }
    Ok(BlockOpCount {
        block: layer.name.clone(),
        op_ac: ac,
        op_mac: mac,
    })
}

/// `T * (fr * E_AC * OP_AC + E_MAC * OP_MAC)` in picojoules.
pub fn block_energy(c: &BlockOpCount, fr: f64, t: usize, k: &EnergyConstants) -> Result<f64> {
    if !(0.0..=1.0).contains(&fr) {
        return Err(Error::contract(format!(
            "{}: firing rate {fr} outside [0, 1]",
            c.block
        )));
    }
    if t == 0 {
        return Err(Error::contract(format!("{}: zero time steps", c.block)));
    }
    Ok(t as f64 * (fr * k.e_ac_pj * c.op_ac as f64 + k.e_mac_pj * c.op_mac as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockEnergy {
    pub count: BlockOpCount,
    pub kind: &'static str,
    pub input: ValueKind,
    /// Time steps the block runs for.
    pub steps: usize,
    pub fr: f64,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub constants: EnergyConstants,
    pub timesteps: usize,
    pub blocks: Vec<BlockEnergy>,
    pub total_pj: f64,
    /// Mean neuron firing rate over the profiled samples.
    pub mean_fr: f64,
    /// Total of the reference analog network, when known.
    pub ann_total_pj: Option<f64>,
}

pub const ENERGY_CSV_HEADER: &str = "block,kind,op_ac,op_mac,fr,energy_pj";

impl EnergyReport {
    pub fn total_uj(&self) -> f64 {
        self.total_pj * 1e-6
    }

    pub fn ratio_vs_ann(&self) -> Option<f64> {
        self.ann_total_pj
            .filter(|&a| a > 0.0)
            .map(|a| self.total_pj / a)
    }

    pub fn with_ann(mut self, ann: &EnergyReport) -> Self {
        self.ann_total_pj = Some(ann.total_pj);
        self
    }

    pub fn header(&self) -> String {
        format!(
            "energy model: E_block = T * (fr * E_AC * OP_AC + E_MAC * OP_MAC)\n\
             constants: E_MAC = {} pJ, E_AC = {} pJ (32-bit float, 45 nm)\n\
             rules: conv on spike input = AC, conv on analog input = MAC; bias add = AC; \
             norm, neuron update, attention gating = MAC; upsample = 4 MAC per output; \
             add, time mean = AC; fr = input firing rate for spike-input blocks, 1 otherwise; \
             T = time steps the block runs for\n",
            self.constants.e_mac_pj, self.constants.e_ac_pj
        )
    }

    pub fn to_table(&self) -> String {
        let mut s = self.header();
        let _ = writeln!(
            s,
            "{:<28} {:<10} {:>6} {:>3} {:>12} {:>12} {:>7} {:>14}",
            "block", "kind", "input", "T", "op_ac", "op_mac", "fr", "energy_pj"
        );
        for b in &self.blocks {
            let input = match b.input {
                ValueKind::Spike => "spike",
                ValueKind::Analog => "analog",
            };
            let _ = writeln!(
                s,
                "{:<28} {:<10} {:>6} {:>3} {:>12} {:>12} {:>7.4} {:>14.1}",
                b.count.block,
                b.kind,
                input,
                b.steps,
                b.count.op_ac,
                b.count.op_mac,
                b.fr,
                b.energy_pj
            );
        }
        let _ = writeln!(
            s,
            "total: {:.1} pJ = {:.4} uJ, T = {}",
            self.total_pj,
            self.total_uj(),
            self.timesteps
        );
        if let Some(r) = self.ratio_vs_ann() {
            let _ = writeln!(s, "ratio vs analog network: {r:.4}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(ENERGY_CSV_HEADER);
        s.push('\n');
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.3}",
                b.count.block, b.kind, b.count.op_ac, b.count.op_mac, b.fr, b.energy_pj
            );
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let v = serde_json::json!({
            "total_pj": self.total_pj,
            "total_uj": self.total_uj(),
            "T": self.timesteps,
            "ratio_vs_ann": self.ratio_vs_ann(),
        });
        serde_json::to_string_pretty(&v).expect("plain values serialise")
    }
}

fn build_report(
    g: &ModelGraph,
    shapes: &[Shape],
    activity: impl Fn(usize) -> f64,
    all_mac: bool,
    k: &EnergyConstants,
) -> Result<Vec<BlockEnergy>> {
    let mut blocks = Vec::new();
    for (i, layer) in g.layers().iter().enumerate() {
        let Some(&src) = layer.inputs.first() else {
            continue;
        };
        let in_shape = shapes[src];
        let input = if all_mac {
            ValueKind::Analog
        } else {
            g.layers()[src].kind
        };
        let mut count = count_ops(layer, in_shape, shapes[i], input)?;
        if all_mac {
            count.op_mac += count.op_ac;
            count.op_ac = 0;
        }
        let fr = match input {
            ValueKind::Spike => activity(src),
            ValueKind::Analog => 1.0,
        };
        let steps = in_shape[0].max(1);
        let energy_pj = block_energy(&count, fr, steps, k)?;
        blocks.push(BlockEnergy {
            count,
            kind: layer.op.kind_name(),
            input,
            steps,
            fr,
            energy_pj,
        });
    }
    Ok(blocks)
}

fn total(blocks: &[BlockEnergy]) -> f64 {
    blocks.iter().map(|b| b.energy_pj).sum()
}

/// Profile a spiking network on `samples`, averaging block firing rates over
/// the samples.
pub fn profile_snn(
    g: &ModelGraph,
    samples: &[Tensor],
    k: &EnergyConstants,
) -> Result<EnergyReport> {
    if samples.is_empty() {
        return Err(Error::config("energy profiling needs at least one sample"));
    }
    let n_layers = g.layers().len();
    let mut activity = vec![0.0f64; n_layers];
    let mut shapes = Vec::new();
    let mut mean_fr = 0.0f64;
    for x in samples {
        let out = g.forward(x)?;
        for (&slot, &a) in &out.stats.activity {
            activity[slot] += a as f64;
        }
        mean_fr += out.stats.mean_firing_rate() as f64;
        shapes = out.stats.shapes;
    }
    let n = samples.len() as f64;
    activity.iter_mut().for_each(|a| *a /= n);
    let blocks = build_report(g, &shapes, |slot| activity[slot], false, k)?;
    Ok(EnergyReport {
        constants: *k,
        timesteps: g.timesteps(),
        total_pj: total(&blocks),
        blocks,
        mean_fr: mean_fr / n,
        ann_total_pj: None,
    })
}

/// Profile an analog network: every operation is a multiply-accumulate and
/// runs once.
pub fn profile_ann(g: &ModelGraph, sample: &Tensor, k: &EnergyConstants) -> Result<EnergyReport> {
    if g.is_spiking() {
        return Err(Error::config("profile_ann expects an analog network"));
    }
    let out = g.forward(sample)?;
    let blocks = build_report(g, &out.stats.shapes, |_| 1.0, true, k)?;
    Ok(EnergyReport {
        constants: *k,
        timesteps: 1,
        total_pj: total(&blocks),
        blocks,
        mean_fr: 0.0,
        ann_total_pj: None,
    })
}
