//! Central finite differences against the tape's reverse sweep.
//!
//! Each check contracts the op output with random weights `W` and compares
//! `f(x + h d) - f(x - h d)` (evaluated in f64 from the forward values) with
//! the reverse-mode gradient applied to the same perturbation `2 h d`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spikeir::autograd::{AttentionParams, Tape, Var};
use spikeir::distill::{kd_loss_tape, restoration_loss_tape, KdConfig, LossWeights, StageSet};
use spikeir::model::{build_student, build_teacher, LayerOp, ModelGraph, StageId, StudentConfig};
use spikeir::neuron::{lif_forward, LifParams, SpikeForward};
use spikeir::tensor::Tensor;
use spikeir::Result;

use super::{away_from_zero, oracles, rng, uniform, Outcome};

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct Case {
    pub inputs: Vec<Tensor>,
    /// Inputs that are differentiated; the rest enter as constants.
    pub check: Vec<bool>,
    pub build: Build,
    pub h: f32,
}

fn contract(y: &Tensor, w: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn eval(case: &Case, inputs: &[Tensor], w: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = (case.build)(&mut tape, &vars).expect("forward");
    contract(tape.value(y), w)
}

/// `|fd - an|` relative to the size of the terms making up `an`, so that a
/// directional derivative that happens to cancel is not judged by f32 noise.
fn rel(fd: f64, an: f64, terms: f64) -> f64 {
    let scale = fd.abs().max(an.abs()).max(terms);
    if scale == 0.0 {
        0.0
    } else {
        (fd - an).abs() / scale
    }
}

/// Worst relative error over the checked inputs of one case.
pub fn run_case(case: &Case, rng: &mut ChaCha8Rng) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(&case.check)
        .map(|(t, &c)| {
            if c {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let y = (case.build)(&mut tape, &vars).expect("forward");
    let w = uniform(rng, tape.shape(y), -1.0, 1.0);
    let n = w.len() as f64;
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv).expect("mul");
    let loss = tape.mean_all(p).expect("mean");
    let grads = tape.backward(loss).expect("backward");
    let mut worst = 0.0f64;
    for (i, x) in case.inputs.iter().enumerate() {
        if !case.check[i] {
            continue;
        }
        let d = uniform(rng, x.shape(), -1.0, 1.0);
        let plus = Tensor::from_fn(x.shape(), |p| x.at(p) + case.h * d.at(p));
        let minus = Tensor::from_fn(x.shape(), |p| x.at(p) - case.h * d.at(p));
        let g = grads.get(vars[i]).expect("gradient for a checked input");
        let (an, terms) = g
            .data()
            .iter()
            .zip(plus.data().iter().zip(minus.data()))
            .map(|(&gi, (&a, &b))| gi as f64 * (a as f64 - b as f64))
            .fold((0.0, 0.0), |(s, t), v| (s + n * v, t + n * v.abs()));
        let mut ins = case.inputs.clone();
        ins[i] = plus;
        let fp = eval(case, &ins, &w);
        ins[i] = minus;
        let fm = eval(case, &ins, &w);
        if std::env::var("FD_DEBUG").is_ok() {
            eprintln!(
                "input {i} shape {:?} fd {:.9e} an {:.9e} rel {:.2e}",
                x.shape(),
                fp - fm,
                an,
                rel(fp - fm, an, terms)
            );
        }
        worst = worst.max(rel(fp - fm, an, terms));
    }
    worst
}

pub const OPS: &[&str] = &[
    "conv2d",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "abs",
    "square",
    "mean_all",
    "reduce_mean",
    "repeat0",
    "resize",
    "channel_pool",
    "rdft2",
    "channel_norm",
    "lif",
    "attention",
    "restoration_loss",
    "kd_loss",
];

pub const INSTANCES: usize = 5;
pub const TOL: f64 = 1e-3;
pub const TOL_LIF: f64 = 1e-2;

pub fn tolerance(op: &str) -> f64 {
    if op == "lif" {
        TOL_LIF
    } else {
        TOL
    }
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(2..6),
        rng.random_range(2..6),
    ]
}

fn smooth_lif() -> LifParams {
    LifParams {
        forward: SpikeForward::Smooth,
        ..LifParams::default()
    }
}

/// LIF currents whose pre-reset membrane stays at least `margin` from the
/// threshold, so the hard reset is constant under small perturbations.
fn lif_currents(rng: &mut ChaCha8Rng, margin: f32) -> Tensor {
    let p = smooth_lif();
    loop {
        let shape = [
            rng.random_range(2..6),
            rng.random_range(1..3),
            rng.random_range(2..4),
            rng.random_range(2..4),
        ];
        let x = uniform(rng, shape, -0.5, 1.6);
        let trace = lif_forward(&x, &p);
        if trace
            .v_pre
            .data()
            .iter()
            .all(|v| (v - p.v_th).abs() > margin)
        {
            return x;
        }
    }
}

pub fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let h = 1e-2;
    let shape = dims(rng);
    let unary = |inputs: Vec<Tensor>, build: Build| Case {
        check: vec![true; inputs.len()],
        inputs,
        build,
        h,
    };
    match op {
        "conv2d" => {
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let stride = rng.random_range(1..3);
            let pad = if rng.random_bool(0.5) { k / 2 } else { 0 };
            let [n, ci, _, _] = dims(rng);
            let (hh, ww) = (rng.random_range(3..7), rng.random_range(3..7));
            let co = rng.random_range(1..4);
            let x = uniform(rng, [n, ci, hh, ww], -1.0, 1.0);
            let w = uniform(rng, [co, ci, k, k], -1.0, 1.0);
            let b = uniform(rng, [1, co, 1, 1], -1.0, 1.0);
            // linear in each input separately, so a long step has no truncation error
            Case {
                inputs: vec![x, w, b],
                check: vec![true; 3],
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
                h: 0.1,
            }
        }
        "relu" => unary(
            vec![away_from_zero(rng, shape, 0.05, 1.0)],
            Box::new(|t, v| t.relu(v[0])),
        ),
        "abs" => unary(
            vec![away_from_zero(rng, shape, 0.05, 1.0)],
            Box::new(|t, v| t.abs(v[0])),
        ),
        "square" => unary(
            vec![uniform(rng, shape, -1.0, 1.0)],
            Box::new(|t, v| t.square(v[0])),
        ),
        "mean_all" => unary(
            vec![uniform(rng, shape, -1.0, 1.0)],
            Box::new(|t, v| t.mean_all(v[0])),
        ),
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            unary(
                vec![uniform(rng, shape, -1.0, 1.0)],
                Box::new(move |t, v| t.scale(v[0], s)),
            )
        }
        "add" | "sub" | "mul" => {
            let s = dims(rng);
            let a = uniform(rng, s, -1.0, 1.0);
            let b = uniform(rng, s, -1.0, 1.0);
            let build: Build = match op {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            unary(vec![a, b], build)
        }
        "reduce_mean" => {
            let axis = rng.random_range(0..4);
            unary(
                vec![uniform(rng, shape, -1.0, 1.0)],
                Box::new(move |t, v| t.reduce_mean(v[0], axis)),
            )
        }
        "repeat0" => {
            let [_, c, hh, ww] = dims(rng);
            let steps = rng.random_range(1..5);
            unary(
                vec![uniform(rng, [1, c, hh, ww], -1.0, 1.0)],
                Box::new(move |t, v| t.repeat0(v[0], steps)),
            )
        }
        "resize" => {
            let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
            unary(
                vec![uniform(rng, shape, -1.0, 1.0)],
                Box::new(move |t, v| t.resize(v[0], oh, ow)),
            )
        }
        "channel_pool" => {
            let s = [
                rng.random_range(1..3),
                rng.random_range(2..8),
                rng.random_range(2..5),
                rng.random_range(2..5),
            ];
            let c_out = rng.random_range(1..=s[1]);
            unary(
                vec![uniform(rng, s, -1.0, 1.0)],
                Box::new(move |t, v| t.channel_pool(v[0], c_out)),
            )
        }
        "rdft2" => {
            let [n, c, _, _] = dims(rng);
            let s = [n, c, rng.random_range(2..7), rng.random_range(2..9)];
            unary(
                vec![uniform(rng, s, -1.0, 1.0)],
                Box::new(|t, v| t.rdft2(v[0])),
            )
        }
        "channel_norm" => {
            let s = [
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(2..5),
                rng.random_range(2..5),
            ];
            let x = uniform(rng, s, -1.0, 1.0);
            let scale = uniform(rng, [1, s[1], 1, 1], 0.5, 1.5);
            let shift = uniform(rng, [1, s[1], 1, 1], -0.5, 0.5);
            unary(
                vec![x, scale, shift],
                Box::new(|t, v| t.channel_norm(v[0], v[1], v[2])),
            )
        }
        "lif" => Case {
            inputs: vec![lif_currents(rng, 0.05)],
            check: vec![true],
            build: Box::new(|t, v| t.lif(v[0], smooth_lif())),
            h: 1e-3,
        },
        "attention" => {
            let s = [
                rng.random_range(1..5),
                rng.random_range(1..4),
                rng.random_range(2..5),
                rng.random_range(2..5),
            ];
            let c = s[1];
            let spikes = Tensor::from_fn(s, |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            let membrane = uniform(rng, s, -1.0, 2.0);
            let inputs = vec![
                spikes,
                uniform(rng, [1, 1, 1, 2], -1.0, 1.0),
                uniform(rng, [1, c, 1, 1], -1.0, 1.0),
                uniform(rng, [1, c, 1, 1], -1.0, 1.0),
                uniform(rng, [1, c, 1, 1], -1.0, 1.0),
                uniform(rng, [1, 1, 1, 1], -1.0, 1.0),
            ];
            Case {
                inputs,
                check: vec![false, true, true, true, true, true],
                build: Box::new(move |t, v| {
                    t.attention(
                        v[0],
                        &membrane,
                        AttentionParams {
                            time: v[1],
                            chan_w: v[2],
                            chan_b: v[3],
                            space_w: v[4],
                            space_b: v[5],
                        },
                    )
                }),
                h,
            }
        }
        "restoration_loss" => {
            let s = [
                1,
                rng.random_range(1..3),
                rng.random_range(2..7),
                rng.random_range(2..9),
            ];
            let target = uniform(rng, s, 0.0, 1.0);
            let offset = away_from_zero(rng, s, 0.05, 0.3);
            let pred = Tensor::from_fn(s, |p| target.at(p) + offset.at(p));
            let lambda = rng.random_range(0.0..1.0);
            Case {
                inputs: vec![pred, target],
                check: vec![true, true],
                build: Box::new(move |t, v| {
                    restoration_loss_tape(
                        t,
                        v[0],
                        v[1],
                        LossWeights {
                            lambda_freq: lambda,
                        },
                    )
                }),
                h: 1e-3,
            }
        }
        "kd_loss" => {
            let stages = [StageSet::All, StageSet::Mid, StageSet::Decoder][rng.random_range(0..3)];
            let cfg = KdConfig {
                gamma: rng.random_range(0.05..1.0),
                stages,
                sum: rng.random_bool(0.5),
            };
            let ids: Vec<StageId> = stages.stages();
            let mut inputs = Vec::new();
            let mut teacher = BTreeMap::new();
            for &s in &ids {
                let (c, hh, ww) = (
                    rng.random_range(1..4),
                    rng.random_range(2..5),
                    rng.random_range(2..5),
                );
                inputs.push(uniform(rng, [1, c, hh, ww], -1.0, 1.0));
                let m = rng.random_range(1..3);
                teacher.insert(s, uniform(rng, [1, c * m, 2 * hh, 2 * ww], -1.0, 1.0));
            }
            Case {
                check: vec![true; inputs.len()],
                inputs,
                build: Box::new(move |t, v| {
                    let taps: BTreeMap<StageId, Var> =
                        ids.iter().copied().zip(v.iter().copied()).collect();
                    Ok(kd_loss_tape(t, &taps, &teacher, &cfg)?.expect("active stages"))
                }),
                h,
            }
        }
        other => panic!("no finite-difference case for {other}"),
    }
}

/// Run `INSTANCES` random cases of `op` and report the worst error.
pub fn check_op(op: &str, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let worst = (0..INSTANCES)
        .map(|_| run_case(&case(op, &mut r), &mut r))
        .fold(0.0, f64::max);
    let tol = tolerance(op);
    Outcome::new(
        op,
        worst < tol,
        format!("worst rel err {worst:.2e} (tol {tol:.0e}, {INSTANCES} instances)"),
    )
}

/// Input gradient of the attention gates: statistics are held fixed, so the
/// reference is the finite difference of `x -> x * G(x0)` with the gate
/// tensor `G` evaluated independently at the base point.
pub fn check_attention_input(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let s = [
            r.random_range(1..5),
            r.random_range(1..4),
            r.random_range(2..5),
            r.random_range(2..5),
        ];
        let c = s[1];
        let x = Tensor::from_fn(s, |_| if r.random_bool(0.4) { 1.0 } else { 0.0 });
        let v = uniform(&mut r, s, -1.0, 2.0);
        let time = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let cw: Vec<f32> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let cb: Vec<f32> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let sw: Vec<f32> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let sb = r.random_range(-1.0..1.0);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let p = AttentionParams {
            time: tape.constant(Tensor::new([1, 1, 1, 2], time.to_vec()).unwrap()),
            chan_w: tape.constant(Tensor::new([1, c, 1, 1], cw.clone()).unwrap()),
            chan_b: tape.constant(Tensor::new([1, c, 1, 1], cb.clone()).unwrap()),
            space_w: tape.constant(Tensor::new([1, c, 1, 1], sw.clone()).unwrap()),
            space_b: tape.constant(Tensor::scalar(sb)),
        };
        let y = tape.attention(xv, &v, p).unwrap();
        let w = uniform(&mut r, s, -1.0, 1.0);
        let wv = tape.constant(w.clone());
        let m = tape.mul(y, wv).unwrap();
        let loss = tape.mean_all(m).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(xv).unwrap();
        let gates = oracles::attention_gates(&x, &v, time, &cw, &cb, &sw, sb);
        let d = uniform(&mut r, s, -1.0, 1.0);
        let h = 1e-2f64;
        let f = |sign: f64| -> f64 {
            x.data()
                .iter()
                .zip(d.data())
                .zip(&gates)
                .zip(w.data())
                .map(|(((&xi, &di), &gi), &wi)| wi as f64 * (xi as f64 + sign * h * di as f64) * gi)
                .sum()
        };
        let fd = f(1.0) - f(-1.0);
        let n = w.len() as f64;
        let (an, terms) = gx
            .data()
            .iter()
            .zip(d.data())
            .map(|(&a, &b)| a as f64 * 2.0 * h * b as f64)
            .fold((0.0, 0.0), |(s, t), v| (s + n * v, t + n * v.abs()));
        worst = worst.max(rel(fd, an, terms));
    }
    Outcome::new(
        "attention input",
        worst < TOL,
        format!("worst rel err {worst:.2e} against fixed-statistics gates"),
    )
}

/// One-level, two-channel micro networks on an 8x8 image.
pub fn micro_config() -> StudentConfig {
    StudentConfig {
        levels: 1,
        channels: vec![2],
        blocks_per_level: 1,
        timesteps: 2,
        lif: smooth_lif(),
        kernel: 3,
        image_channels: 1,
        attention: false,
        zero_tail: false,
    }
}

fn model_output(g: &ModelGraph, img: &Tensor, w: &Tensor) -> f64 {
    contract(&g.forward(img).expect("forward").restored, w)
}

/// Which side of its kink every ReLU input and every neuron membrane lies on.
fn kink_pattern(g: &ModelGraph, img: &Tensor) -> Vec<bool> {
    let mut tape = Tape::new();
    let (fwd, _) = g.forward_tape(&mut tape, img, false).expect("forward");
    let v_th = g.lif_params().map_or(0.0, |p| p.v_th);
    let mut pattern = Vec::new();
    for (i, layer) in g.layers().iter().enumerate() {
        match layer.op {
            LayerOp::Relu => pattern.extend(
                tape.value(fwd.slots[layer.inputs[0]])
                    .data()
                    .iter()
                    .map(|&v| v > 0.0),
            ),
            LayerOp::Lif => pattern.extend(
                tape.membrane(fwd.slots[i])
                    .expect("membrane")
                    .data()
                    .iter()
                    .map(|&v| v >= v_th),
            ),
            _ => {}
        }
    }
    pattern
}

fn perturbed(g: &ModelGraph, dirs: &[Tensor], h: f32) -> ModelGraph {
    let mut out = g.clone();
    let names: Vec<String> = g
        .params()
        .entries()
        .iter()
        .map(|e| e.name.clone())
        .collect();
    for (name, d) in names.iter().zip(dirs) {
        let p = out.params_mut().by_name_mut(name).expect("parameter");
        for (v, &di) in p.data_mut().iter_mut().zip(d.data()) {
            *v += h * di;
        }
    }
    out
}

/// Whole-network finite differences along one random direction in parameter
/// space per instance. Draws whose perturbation moves any ReLU input or
/// neuron membrane across its kink are redrawn: there the network is not
/// differentiable and central differences do not apply.
pub fn check_model(spiking: bool, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut redrawn = 0usize;
    let h = 1e-3f32;
    let mut done = 0;
    while done < INSTANCES {
        assert!(redrawn < 500, "no kink-free perturbation found");
        let cfg = micro_config();
        let net_seed = seed + 1000 * done as u64 + redrawn as u64;
        let g = if spiking {
            build_student(&cfg, net_seed).unwrap()
        } else {
            build_teacher(&cfg.teacher(), net_seed).unwrap()
        };
        let img = uniform(&mut r, [1, 1, 8, 8], 0.0, 1.0);
        let dirs: Vec<Tensor> = g
            .params()
            .entries()
            .iter()
            .map(|e| uniform(&mut r, e.value.shape(), -1.0, 1.0))
            .collect();
        let (plus, minus) = (perturbed(&g, &dirs, h), perturbed(&g, &dirs, -h));
        let base = kink_pattern(&g, &img);
        if kink_pattern(&plus, &img) != base || kink_pattern(&minus, &img) != base {
            redrawn += 1;
            continue;
        }
        let mut tape = Tape::new();
        let (fwd, _) = g.forward_tape(&mut tape, &img, true).unwrap();
        let w = uniform(&mut r, tape.shape(fwd.output), -1.0, 1.0);
        let n = w.len() as f64;
        let wv = tape.constant(w.clone());
        let m = tape.mul(fwd.output, wv).unwrap();
        let loss = tape.mean_all(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        let (mut an, mut terms) = (0.0f64, 0.0f64);
        for (i, &var) in fwd.params.iter().enumerate() {
            let (pv, qv) = (
                &plus.params().entries()[i].value,
                &minus.params().entries()[i].value,
            );
            for (&gi, (&a, &b)) in grads
                .get(var)
                .unwrap()
                .data()
                .iter()
                .zip(pv.data().iter().zip(qv.data()))
            {
                let v = n * gi as f64 * (a as f64 - b as f64);
                an += v;
                terms += v.abs();
            }
        }
        let fd = model_output(&plus, &img, &w) - model_output(&minus, &img, &w);
        if std::env::var("FD_DEBUG").is_ok() {
            eprintln!("model fd {fd:.9e} an {an:.9e} terms {terms:.3e}");
        }
        worst = worst.max(rel(fd, an, terms));
        done += 1;
    }
    let (name, tol) = if spiking {
        ("spiking micro-network", TOL_LIF)
    } else {
        ("analog micro-network", TOL)
    };
    Outcome::new(
        name,
        worst < tol,
        format!("worst rel err {worst:.2e} (tol {tol:.0e}, {redrawn} draws crossed a kink)"),
    )
}

/// All gradient checks, op by op, then the micro networks.
pub fn all(seed: u64) -> Vec<Outcome> {
    let mut out: Vec<Outcome> = OPS
        .iter()
        .enumerate()
        .map(|(i, op)| check_op(op, seed + i as u64))
        .collect();
    out.push(check_attention_input(seed + 100));
    out.push(check_model(false, seed + 200));
    out.push(check_model(true, seed + 300));
    out
}
