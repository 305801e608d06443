//! Groups of checks shared by the topic tests and the acceptance run.

use rand::Rng;
use spikeir::energy::{block_energy, profile_ann, profile_snn, BlockOpCount, EnergyConstants};
use spikeir::fft::rdft2;
use spikeir::metrics::{psnr, ssim};
use spikeir::model::{GraphBuilder, ModelGraph, NetKind};
use spikeir::neuron::LifParams;
use spikeir::tensor::{bilinear_resize, channel_avg_pool, conv2d, Tensor};

use super::{oracles, rng, ulps, uniform, Outcome};

pub fn conv_vs_nested_loop(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst = 0u64;
    let cases = 25;
    for _ in 0..cases {
        let k = [1, 3, 5][r.random_range(0..3)];
        let stride = r.random_range(1..3);
        let pad = r.random_range(0..=k / 2);
        let (n, ci, co) = (
            r.random_range(1..4),
            r.random_range(1..5),
            r.random_range(1..5),
        );
        let (h, w) = (r.random_range(k..k + 7), r.random_range(k..k + 7));
        let x = uniform(&mut r, [n, ci, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, [co, ci, k, k], -1.0, 1.0);
        let b: Vec<f32> = (0..co).map(|_| r.random_range(-1.0..1.0)).collect();
        let bias = if r.random_bool(0.7) {
            Some(b.as_slice())
        } else {
            None
        };
        let got = conv2d(&x, &wt, bias, stride, pad).unwrap();
        let want = oracles::conv2d(&x, &wt, bias, stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (&a, &b) in got.data().iter().zip(want.data()) {
            worst = worst.max(ulps(a, b));
        }
    }
    Outcome::new(
        "conv2d vs nested loop",
        worst <= 1,
        format!("max {worst} ulp over {cases} cases"),
    )
}

/// Half-spectrum DFT against the defining double sum, and Parseval's
/// identity with the dropped conjugate columns counted twice.
pub fn dft_vs_direct(seed: u64) -> Vec<Outcome> {
    let mut r = rng(seed);
    let (mut worst_abs, mut worst_parseval) = (0.0f64, 0.0f64);
    let cases = 12;
    for _ in 0..cases {
        let (h, w) = (r.random_range(1..11), r.random_range(1..11));
        let c = r.random_range(1..3);
        let x = uniform(&mut r, [1, c, h, w], -1.0, 1.0);
        let spec = rdft2(&x).unwrap();
        let wh = w / 2 + 1;
        for (p, plane) in x.data().chunks_exact(h * w).enumerate() {
            let pd: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
            let (re, im) = oracles::dft2(&pd, h, w);
            let mut energy_freq = 0.0;
            for u in 0..h {
                for v in 0..wh {
                    let i = p * h * wh + u * wh + v;
                    worst_abs = worst_abs
                        .max((spec.re[i] as f64 - re[u * w + v]).abs())
                        .max((spec.im[i] as f64 - im[u * w + v]).abs());
                    let mag = (spec.re[i] as f64).powi(2) + (spec.im[i] as f64).powi(2);
                    let mirrored = v != 0 && !(w % 2 == 0 && v == w / 2);
                    energy_freq += if mirrored { 2.0 * mag } else { mag };
                }
            }
            let energy_space: f64 = pd.iter().map(|v| v * v).sum();
            let rel = (energy_freq / (h * w) as f64 - energy_space).abs() / energy_space;
            worst_parseval = worst_parseval.max(rel);
        }
    }
    vec![
        Outcome::new(
            "rdft2 vs direct DFT",
            worst_abs < 1e-4,
            format!("max abs err {worst_abs:.2e} over {cases} cases"),
        ),
        Outcome::new(
            "Parseval",
            worst_parseval < 1e-4,
            format!("max rel err {worst_parseval:.2e}"),
        ),
    ]
}

pub fn metrics_vs_formulas(seed: u64) -> Vec<Outcome> {
    let mut r = rng(seed);
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    let cases = 8;
    for i in 0..cases {
        let c = if i % 2 == 0 { 1 } else { 3 };
        let (h, w) = (r.random_range(11..22), r.random_range(11..22));
        let a = uniform(&mut r, [1, c, h, w], 0.0, 1.0);
        let sigma = r.random_range(0.01..0.3);
        let b = Tensor::from_fn(a.shape(), |p| {
            (a.at(p) + r.random_range(-sigma..sigma)).clamp(0.0, 1.0)
        });
        dp = dp.max((psnr(&a, &b).unwrap() - oracles::psnr(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - oracles::ssim(&a, &b)).abs());
    }
    let same = uniform(&mut r, [1, 1, 12, 12], 0.0, 1.0);
    dp = dp.max((psnr(&same, &same).unwrap() - 99.0).abs());
    ds = ds.max((ssim(&same, &same).unwrap() - 1.0).abs());
    vec![
        Outcome::new(
            "PSNR vs formula",
            dp < 1e-6,
            format!("max abs diff {dp:.2e} dB"),
        ),
        Outcome::new(
            "SSIM vs formula",
            ds < 1e-5,
            format!("max abs diff {ds:.2e}"),
        ),
    ]
}

pub fn resampling_vs_formulas(seed: u64) -> Vec<Outcome> {
    let mut r = rng(seed);
    let (mut db, mut dc) = (0.0f64, 0.0f64);
    for _ in 0..10 {
        let shape = [
            r.random_range(1..3),
            r.random_range(1..7),
            r.random_range(1..9),
            r.random_range(1..9),
        ];
        let x = uniform(&mut r, shape, -1.0, 1.0);
        let (oh, ow) = (r.random_range(1..13), r.random_range(1..13));
        let got = bilinear_resize(&x, oh, ow).unwrap();
        for (&a, &b) in got.data().iter().zip(&oracles::bilinear(&x, oh, ow)) {
            db = db.max((a as f64 - b).abs());
        }
        let c_out = r.random_range(1..=x.shape()[1]);
        let got = channel_avg_pool(&x, c_out).unwrap();
        for (&a, &b) in got.data().iter().zip(&oracles::channel_pool(&x, c_out)) {
            dc = dc.max((a as f64 - b).abs());
        }
    }
    vec![
        Outcome::new(
            "bilinear resize vs formula",
            db < 1e-5,
            format!("max abs diff {db:.2e}"),
        ),
        Outcome::new(
            "channel pooling vs formula",
            dc < 1e-5,
            format!("max abs diff {dc:.2e}"),
        ),
    ]
}

pub fn oracle_suite(seed: u64) -> Vec<Outcome> {
    let mut out = vec![conv_vs_nested_loop(seed)];
    out.extend(dft_vs_direct(seed + 1));
    out.extend(metrics_vs_formulas(seed + 2));
    out.extend(resampling_vs_formulas(seed + 3));
    out
}

fn ulps64(a: f64, b: f64) -> u64 {
    if a == b {
        0
    } else {
        (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
    }
}

pub fn block_energy_cases(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let k = EnergyConstants::default();
    let mut worst = 0u64;
    let mut shown = Vec::new();
    for i in 0..10 {
        let c = BlockOpCount {
            block: format!("case{i}"),
            op_ac: r.random_range(0..5_000_000),
            op_mac: r.random_range(0..5_000_000),
        };
        let fr = r.random_range(0.0..=1.0);
        let t = r.random_range(1..9);
        let got = block_energy(&c, fr, t, &k).unwrap();
        let want = oracles::block_energy(t, fr, c.op_ac, c.op_mac);
        worst = worst.max(ulps64(got, want));
        if i < 2 {
            shown.push(format!(
                "T={t} fr={fr:.3} ac={} mac={} -> {want:.1} pJ",
                c.op_ac, c.op_mac
            ));
        }
    }
    Outcome::new(
        "block energy, 10 random cases",
        worst <= 1,
        format!("max {worst} ulp; e.g. {}", shown.join("; ")),
    )
}

/// Input -> encode(4) -> 3x3 conv (1->2) -> neuron -> 3x3 conv (2->1) -> time mean.
/// The first conv passes a constant 0.6 through its centre tap, so every
/// neuron integrates 0.6, 0.9, 1.05 (spike), 0.625: firing rate exactly 1/4.
pub fn micro_snn() -> (ModelGraph, Tensor) {
    let mut b = GraphBuilder::new(1, 0);
    let x = b.input();
    let e = b.encode(x, 4);
    let c1 = b.conv("c1", e, 1, 2, 3, 1);
    let s = b.lif("n1", c1);
    let c2 = b.conv("c2", s, 2, 1, 3, 1);
    let out = b.time_mean("readout", c2);
    let mut g = b.finish(
        NetKind::Spiking {
            timesteps: 4,
            lif: LifParams::default(),
        },
        out,
        1,
    );
    let w = g.params_mut().by_name_mut("c1.weight").unwrap();
    *w = Tensor::from_fn(
        w.shape(),
        |[_, _, ky, kx]| if ky == 1 && kx == 1 { 1.0 } else { 0.0 },
    );
    (g, Tensor::full([1, 1, 4, 4], 0.6))
}

pub fn micro_ann() -> (ModelGraph, Tensor) {
    let mut b = GraphBuilder::new(1, 0);
    let x = b.input();
    let c1 = b.conv("c1", x, 1, 2, 3, 1);
    let a = b.relu("a1", c1);
    let c2 = b.conv("c2", a, 2, 1, 3, 1);
    (
        b.finish(NetKind::Analog, c2, 1),
        Tensor::full([1, 1, 4, 4], 0.6),
    )
}

pub fn micro_profiles() -> Vec<Outcome> {
    let k = EnergyConstants::default();
    let (g, x) = micro_snn();
    let rep = profile_snn(&g, &[x], &k).unwrap();
    // per block: (T, fr, AC, MAC) for one step on a 4x4 plane
    let by_hand = [
        (1, 1.0, 0, 0),               // encode
        (4, 1.0, 2 * 16, 2 * 16 * 9), // c1: analog input, MACs, bias ACs
        (4, 1.0, 0, 2 * 16),          // n1: one update per neuron
        (4, 0.25, 16 * 18 + 16, 0),   // c2: spike input, ACs gated by fr
        (4, 1.0, 16, 0),              // readout: one add per input value
    ];
    let mut want = 0.0;
    for &(t, fr, ac, mac) in &by_hand {
        want += oracles::block_energy(t, fr, ac, mac);
    }
    let counts_match = rep.blocks.len() == by_hand.len()
        && rep
            .blocks
            .iter()
            .zip(&by_hand)
            .all(|(b, &(t, fr, ac, mac))| {
                b.steps == t && b.fr == fr && b.count.op_ac == ac && b.count.op_mac == mac
            });
    let snn = Outcome::new(
        "spiking micro-model hand trace",
        counts_match && ulps64(rep.total_pj, want) <= 1,
        format!(
            "profiled {:.3} pJ, by hand {want:.3} pJ, block counts match: {counts_match}",
            rep.total_pj
        ),
    );
    let (g, x) = micro_ann();
    let rep = profile_ann(&g, &x, &k).unwrap();
    let want = oracles::block_energy(1, 1.0, 0, 2 * 16 * 9 + 2 * 16)
        + 0.0
        + oracles::block_energy(1, 1.0, 0, 16 * 18 + 16);
    let ann = Outcome::new(
        "analog micro-model hand trace",
        ulps64(rep.total_pj, want) <= 1,
        format!("profiled {:.3} pJ, by hand {want:.3} pJ", rep.total_pj),
    );
    let table = rep.to_table();
    let verbatim = Outcome::new(
        "constants printed verbatim",
        table.contains("4.6 pJ") && table.contains("0.9 pJ"),
        table.lines().nth(1).unwrap_or("").to_string(),
    );
    vec![snn, ann, verbatim]
}

pub fn energy_suite(seed: u64) -> Vec<Outcome> {
    let mut out = vec![block_energy_cases(seed)];
    out.extend(micro_profiles());
    out
}

/// A configuration small enough for command-level checks to take seconds.
pub fn tiny_config(dir: &std::path::Path, extra: &str) -> spikeir::config::RunConfig {
    let text = format!(
        "epochs = 2\nteacher_epochs = 2\nsynthetic_train_images = 2\nsynthetic_val_images = 1\n\
         synthetic_size = 32\npatch_size = 16\npatches_per_image = 4\nprofile_samples = 2\n\
         out_dir = {}\n{extra}",
        dir.display()
    );
    spikeir::config::parse_config(&text).expect("tiny config")
}

/// Train CSV with the wall-clock column removed.
pub fn without_seconds(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn read(p: &std::path::Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn invariant_suite(root: &std::path::Path) -> Vec<Outcome> {
    use spikeir::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
    use spikeir::commands::{cmd_train_student, cmd_train_teacher};
    use spikeir::model::{build_student, build_teacher, LayerOp, StudentConfig};

    let mut out = Vec::new();
    let bits = |g: &spikeir::model::ModelGraph| -> Vec<u32> {
        g.params()
            .entries()
            .iter()
            .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let cfg = StudentConfig::default();
    let student = build_student(&cfg, 1).unwrap();
    let teacher = build_teacher(&cfg.teacher(), 1).unwrap();
    let mut r = rng(8);

    // spikes are binary and rates lie in [0, 1]
    let (mut binary, mut rates_ok, mut neurons) = (true, true, 0usize);
    for _ in 0..3 {
        let x = uniform(&mut r, [1, 1, 32, 32], 0.0, 1.0);
        let mut tape = spikeir::autograd::Tape::new();
        let (fwd, stats) = student.forward_tape(&mut tape, &x, false).unwrap();
        for (i, l) in student.layers().iter().enumerate() {
            if l.op == LayerOp::Lif {
                neurons += 1;
                binary &= tape
                    .value(fwd.slots[i])
                    .data()
                    .iter()
                    .all(|&v| v == 0.0 || v == 1.0);
            }
        }
        rates_ok &= stats
            .firing_rates
            .iter()
            .all(|(_, f)| (0.0..=1.0).contains(f));
        rates_ok &= stats.activity.values().all(|f| (0.0..=1.0).contains(f));
    }
    out.push(Outcome::new(
        "spikes binary",
        binary,
        format!("{neurons} neuron layer outputs checked"),
    ));
    out.push(Outcome::new(
        "firing rates in [0, 1]",
        rates_ok,
        "per-layer rates and slot activity",
    ));

    // zero-initialised tail makes both networks the identity, padding included
    let mut identity = true;
    for (h, w) in [(32, 32), (30, 27), (9, 16)] {
        let x = uniform(&mut r, [1, 1, h, w], 0.0, 1.0);
        for g in [&student, &teacher] {
            let y = g.forward(&x).unwrap().restored;
            identity &= y
                .data()
                .iter()
                .zip(x.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    out.push(Outcome::new(
        "identity at zero-tail init",
        identity,
        "student and teacher, 32x32, 30x27, 9x16",
    ));

    // teacher checkpoint untouched by a distilled student run; reruns identical
    let teacher_dir = root.join("teacher");
    let tcfg = tiny_config(&teacher_dir, "seed = 4\n");
    cmd_train_teacher(&tcfg).unwrap();
    let ck = teacher_dir.join("teacher.spir");
    let before = read(&ck);
    let load = || {
        let c = spikeir::config::parse_config(&format!("teacher_checkpoint = {}\n", ck.display()))
            .unwrap();
        spikeir::commands::load_teacher(&c).unwrap()
    };
    let teacher_loaded = load();
    let extra = format!(
        "seed = 4\nkd = decoder\nteacher_checkpoint = {}\n",
        ck.display()
    );
    let run_dir = root.join("run");
    let files = [
        "student.spir",
        "student_membrane.csv",
        "student_report.txt",
        "student_train.csv",
    ];
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let o = cmd_train_student(&tiny_config(&run_dir, &extra)).unwrap();
            let snap: Vec<Vec<u8>> = files.iter().map(|f| read(&run_dir.join(f))).collect();
            (snap, o)
        })
        .collect();
    let after = read(&ck);
    let reloaded = load();
    // in process: the teacher graph handed to training keeps every bit
    let tiny = tiny_config(&run_dir, &extra);
    let data = spikeir::commands::dataset(&tiny, tiny.sigma, 4).unwrap();
    let mut pupil = build_student(&cfg, 4).unwrap();
    let teacher_bits = bits(&teacher_loaded);
    spikeir::distill::train_student(
        &mut pupil,
        Some(&teacher_loaded),
        &data,
        &tiny.kd,
        &tiny.train_config(2, 4),
        |_| {},
    )
    .unwrap();
    out.push(Outcome::new(
        "teacher frozen under distillation",
        before == after && bits(&teacher_loaded) == teacher_bits && bits(&reloaded) == teacher_bits,
        format!(
            "{} teacher parameters bit-identical after training, checkpoint bytes unchanged after two distilled runs",
            teacher_bits.len()
        ),
    ));

    // checkpoint round trip of a trained student
    let trained = &runs[0].1.model;
    let p = root.join("roundtrip.spir");
    save_checkpoint(trained, "seed = 4\n", &p).unwrap();
    let ck2 = load_checkpoint(&p).unwrap();
    let mut fresh = build_student(&cfg, 99).unwrap();
    ck2.apply(&mut fresh).unwrap();
    let rt = bits(trained) == bits(&fresh)
        && Checkpoint::from_graph(&fresh, "seed = 4\n").to_bytes() == read(&p);
    out.push(Outcome::new(
        "checkpoint round trip bit-exact",
        rt,
        format!("{} parameters", fresh.param_count()),
    ));

    // same seed, same bytes
    let (a, b) = (&runs[0].0, &runs[1].0);
    let mut same = true;
    let mut notes = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let eq = if *f == "student_train.csv" {
            let strip = |v: &Vec<u8>| without_seconds(&String::from_utf8(v.clone()).unwrap());
            strip(&a[i]) == strip(&b[i])
        } else {
            a[i] == b[i]
        };
        same &= eq;
        notes.push(format!("{f} {}", if eq { "identical" } else { "DIFFERS" }));
    }
    out.push(Outcome::new(
        "same-seed runs byte-identical",
        same,
        notes.join(", "),
    ));
    out
}

/// Distilled and undistilled runs both export membrane histograms and a
/// density fraction.
pub fn membrane_suite(root: &std::path::Path) -> Vec<Outcome> {
    use spikeir::commands::{cmd_train_student, cmd_train_teacher};
    use spikeir::neuron::HISTOGRAM_BINS;

    let tdir = root.join("teacher");
    cmd_train_teacher(&tiny_config(&tdir, "")).unwrap();
    let ck = tdir.join("teacher.spir");
    let mut out = Vec::new();
    for (arm, extra) in [
        (
            "with distillation",
            format!("kd = decoder\nteacher_checkpoint = {}\n", ck.display()),
        ),
        ("without distillation", "kd = none\n".to_string()),
    ] {
        let dir = root.join(arm.replace(' ', "_"));
        let o = cmd_train_student(&tiny_config(&dir, &extra)).unwrap();
        let csv = String::from_utf8(read(&dir.join("student_membrane.csv"))).unwrap();
        let mut lines = csv.lines();
        let header_ok = lines.next() == Some("step,layer,bin_lo,bin_hi,count");
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let well_formed = rows.iter().all(|r| {
            r.len() == 5
                && r[0].parse::<usize>().is_ok()
                && r[2].parse::<f32>().is_ok()
                && r[3].parse::<f32>().is_ok()
                && r[4].parse::<u64>().is_ok()
        });
        let layers: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[1]).collect();
        let steps = o.model.timesteps();
        let complete = rows.len() == layers.len() * steps * HISTOGRAM_BINS;
        let report = String::from_utf8(read(&dir.join("student_report.txt"))).unwrap();
        let density = report
            .lines()
            .find_map(|l| l.strip_prefix("student: membrane density fraction "))
            .and_then(|v| v.trim().parse::<f64>().ok());
        let ok = header_ok
            && well_formed
            && complete
            && density.is_some_and(|d| (0.0..=1.0).contains(&d));
        out.push(Outcome::new(
            format!("membrane export {arm}"),
            ok,
            format!(
                "{} rows over {} layers x {steps} steps x {HISTOGRAM_BINS} bins, density fraction {}",
                rows.len(),
                layers.len(),
                density.map_or("missing".into(), |d| format!("{d:.4}"))
            ),
        ));
    }
    out
}
