//! The user-facing commands. Each reads a [`RunConfig`], writes its outputs
//! under `out_dir`, and returns what it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{restore, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{self, Dataset, ImageBuffer, PatchPair};
use crate::distill::{self, EpochRecord, KdConfig, StageSet, TrainRun};
use crate::energy::{profile_ann, profile_snn, EnergyConstants};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{build_student, build_teacher, ModelGraph};
use crate::neuron::{histogram_csv, histogram_rows, HistogramRow};
use crate::tensor::Tensor;

/// PSNR gain over the degraded input that counts as converged.
pub const CONVERGENCE_GAIN_DB: f64 = 1.5;

/// Worker threads from `SPIKEIR_THREADS`, default 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var("SPIKEIR_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!(
                "SPIKEIR_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.clone())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<ImageBuffer>> {
    paths.iter().map(data::load_image).collect()
}

/// Training and validation patches for `sigma` and `seed`: from the manifests
/// when given, procedural images otherwise.
pub fn dataset(cfg: &RunConfig, sigma: u32, seed: u64) -> Result<Dataset> {
    match (&cfg.train_manifest, &cfg.val_manifest) {
        (None, None) => data::synthetic_dataset(&cfg.synthetic_spec(sigma, seed)),
        (Some(t), Some(v)) => {
            let split = data::SplitManifest {
                train: data::read_manifest(t)?,
                val: data::read_manifest(v)?,
                patch_size: cfg.patch_size,
                patches_per_image: cfg.patches_per_image,
            };
            split.validate()?;
            Dataset::from_images(
                &load_all(&split.train)?,
                &load_all(&split.val)?,
                sigma as f32,
                cfg.patch_size,
                cfg.patches_per_image,
                seed,
            )
        }
        (Some(_), None) => Err(Error::config(
            "train_manifest is set but val_manifest is not",
        )),
        (None, Some(_)) => Err(Error::config(
            "val_manifest is set but train_manifest is not",
        )),
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str, why: &str) -> Result<&'a PathBuf> {
    let p = p
        .as_ref()
        .ok_or_else(|| Error::config(format!("{key} is required {why}")))?;
    if !p.exists() {
        return Err(Error::config(format!(
            "{key} '{}' does not exist",
            p.display()
        )));
    }
    Ok(p)
}

pub fn load_teacher(cfg: &RunConfig) -> Result<ModelGraph> {
    let path = require(
        &cfg.teacher_checkpoint,
        "teacher_checkpoint",
        "for this command",
    )?;
    let mut t = build_teacher(&cfg.teacher_config(), cfg.seed)?;
    restore(&mut t, path)?;
    Ok(t)
}

pub fn load_student(cfg: &RunConfig) -> Result<ModelGraph> {
    let path = require(
        &cfg.student_checkpoint,
        "student_checkpoint",
        "for this command",
    )?;
    let mut s = build_student(&cfg.student, cfg.seed)?;
    restore(&mut s, path)?;
    Ok(s)
}

#[derive(Clone, Debug, Default)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    /// Human-readable result summary.
    pub summary: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub output: CommandOutput,
    pub run: TrainRun,
    pub input_psnr: f64,
    pub model: ModelGraph,
}

fn progress(label: &str) -> impl FnMut(&EpochRecord) + '_ {
    move |r: &EpochRecord| {
        log::info!(
            "{label} epoch {} loss {:.5} kd {:.5} val psnr {:.3} ssim {:.4} fr {:.3}",
            r.epoch,
            r.loss_restore,
            r.loss_kd,
            r.val_psnr,
            r.val_ssim,
            r.mean_fr
        );
    }
}

pub fn cmd_train_teacher(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let data = dataset(cfg, cfg.sigma, cfg.seed)?;
    let mut teacher = build_teacher(&cfg.teacher_config(), cfg.seed)?;
    let run = distill::train_teacher(
        &mut teacher,
        &data,
        &cfg.train_config(cfg.epochs, cfg.seed),
        progress("teacher"),
    )?;
    let mut out = CommandOutput::default();
    out.files
        .push(write(&dir.join("teacher_train.csv"), run.to_csv())?);
    let ck = dir.join("teacher.spir");
    save_checkpoint(&teacher, &cfg.to_text(), &ck)?;
    out.files.push(ck);
    let input_psnr = data.input_psnr()?;
    out.summary = run_summary("teacher", &run, input_psnr, false);
    Ok(TrainOutput {
        output: out,
        run,
        input_psnr,
        model: teacher,
    })
}

fn run_summary(label: &str, run: &TrainRun, input_psnr: f64, spiking: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{label}: validation input psnr {input_psnr:.3} dB");
    if let Some(r) = run.last() {
        let _ = write!(
            s,
            "{label}: final epoch {} psnr {:.3} dB (gain {:+.3}) ssim {:.4}",
            r.epoch,
            r.val_psnr,
            r.val_psnr - input_psnr,
            r.val_ssim
        );
        if spiking {
            let _ = write!(
                s,
                " mean fr {:.4} voltage density {:.4}",
                r.mean_fr, r.volt_density
            );
        }
        s.push('\n');
    }
    match run.epochs_to_reach(input_psnr + CONVERGENCE_GAIN_DB) {
        Some(e) => {
            let _ = writeln!(
                s,
                "{label}: reached input + {CONVERGENCE_GAIN_DB} dB at epoch {e}"
            );
        }
        None => {
            let _ = writeln!(s, "{label}: did not reach input + {CONVERGENCE_GAIN_DB} dB");
        }
    }
    s
}

/// Membrane histograms summed over `samples`, and the mean voltage density.
pub fn membrane_histograms(
    model: &ModelGraph,
    samples: &[Tensor],
) -> Result<(Vec<HistogramRow>, f64)> {
    let v_th = model
        .lif_params()
        .ok_or_else(|| Error::config("membrane histograms need the spiking network"))?
        .v_th;
    let mut rows: Vec<HistogramRow> = Vec::new();
    let mut density = 0.0;
    for x in samples {
        let out = model.forward(x)?;
        density += out.stats.voltage_density(v_th) as f64;
        let fresh: Vec<HistogramRow> = out
            .stats
            .membranes
            .iter()
            .flat_map(|(name, v)| histogram_rows(name, v, v_th))
            .collect();
        if rows.is_empty() {
            rows = fresh;
        } else {
            for (r, f) in rows.iter_mut().zip(fresh) {
                r.count += f.count;
            }
        }
    }
    Ok((rows, density / samples.len().max(1) as f64))
}

fn val_inputs(data: &Dataset, n: usize) -> Vec<Tensor> {
    data.val.iter().take(n).map(|p| p.noisy.clone()).collect()
}

pub fn cmd_train_student(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let teacher = if cfg.kd.is_active() {
        Some(load_teacher(cfg).map_err(|e| match e {
            Error::Config(m) => Error::config(format!(
                "distillation over stages {}: {m}",
                cfg.kd.stages.label()
            )),
            other => other,
        })?)
    } else {
        None
    };
    let dir = out_dir(cfg)?;
    let data = dataset(cfg, cfg.sigma, cfg.seed)?;
    let mut student = build_student(&cfg.student, cfg.seed)?;
    let run = distill::train_student(
        &mut student,
        teacher.as_ref(),
        &data,
        &cfg.kd,
        &cfg.train_config(cfg.epochs, cfg.seed),
        progress("student"),
    )?;
    let mut out = CommandOutput::default();
    out.files
        .push(write(&dir.join("student_train.csv"), run.to_csv())?);
    let ck = dir.join("student.spir");
    save_checkpoint(&student, &cfg.to_text(), &ck)?;
    out.files.push(ck);
    let (rows, density) = membrane_histograms(&student, &val_inputs(&data, cfg.profile_samples))?;
    out.files.push(write(
        &dir.join("student_membrane.csv"),
        histogram_csv(&rows),
    )?);
    let input_psnr = data.input_psnr()?;
    let mut summary = format!(
        "kd stages {} gamma {}\n",
        cfg.kd.stages.label(),
        cfg.kd.gamma
    );
    summary.push_str(&run_summary("student", &run, input_psnr, true));
    let _ = writeln!(summary, "student: membrane density fraction {density:.4}");
    out.files
        .push(write(&dir.join("student_report.txt"), &summary)?);
    out.summary = summary;
    Ok(TrainOutput {
        output: out,
        run,
        input_psnr,
        model: student,
    })
}

/// `(degraded, clean)` image pairs for evaluation.
pub fn eval_pairs(cfg: &RunConfig) -> Result<Vec<(String, PatchPair)>> {
    if let Some(m) = &cfg.eval_manifest {
        let text = fs::read_to_string(m).map_err(|e| Error::io(m, e))?;
        let base = m.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(Error::ConfigLine {
                    line: i + 1,
                    msg: "eval manifest lines hold a degraded and a clean path".into(),
                });
            }
            let noisy = data::load_image(base.join(parts[0]))?.to_tensor();
            let clean = data::load_image(base.join(parts[1]))?.to_tensor();
            pairs.push((parts[0].to_string(), PatchPair { clean, noisy }));
        }
        return Ok(pairs);
    }
    let data = dataset(cfg, cfg.sigma, cfg.seed)?;
    Ok(data
        .val
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("val{i}"), p))
        .collect())
}

pub const EVAL_CSV_HEADER: &str = "image,psnr,ssim";

/// Per-image and mean PSNR/SSIM of the student's restorations, or of the
/// degraded inputs themselves when no student checkpoint is configured.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(CommandOutput, f64, f64)> {
    cfg.validate()?;
    let model = match cfg.student_checkpoint {
        Some(_) => Some(load_student(cfg)?),
        None => None,
    };
    let dir = out_dir(cfg)?;
    let pairs = eval_pairs(cfg)?;
    if pairs.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for (name, p) in &pairs {
        let restored = match &model {
            Some(m) => m.forward(&p.noisy)?.restored.map(|v| v.clamp(0.0, 1.0)),
            None => p.noisy.clone(),
        };
        let psnr = metrics::psnr(&restored, &p.clean)?;
        let ssim = metrics::ssim(&restored, &p.clean)?;
        sp += psnr;
        ss += ssim;
        let _ = writeln!(csv, "{name},{psnr:.4},{ssim:.6}");
    }
    let n = pairs.len() as f64;
    let (mp, ms) = (sp / n, ss / n);
    let _ = writeln!(csv, "mean,{mp:.4},{ms:.6}");
    let mut out = CommandOutput::default();
    out.files.push(write(&dir.join("eval.csv"), csv)?);
    out.summary = format!(
        "eval: {} images, mean psnr {mp:.4} dB, mean ssim {ms:.6}\n",
        pairs.len()
    );
    Ok((out, mp, ms))
}

/// Energy reports for the student and its analog twin.
pub fn cmd_profile(cfg: &RunConfig) -> Result<(CommandOutput, f64)> {
    cfg.validate()?;
    let student = match cfg.student_checkpoint {
        Some(_) => load_student(cfg)?,
        None => build_student(&cfg.student, cfg.seed)?,
    };
    let teacher = match cfg.teacher_checkpoint {
        Some(_) => load_teacher(cfg)?,
        None => build_teacher(&cfg.teacher_config(), cfg.seed)?,
    };
    let dir = out_dir(cfg)?;
    let data = dataset(cfg, cfg.sigma, cfg.seed)?;
    let samples = val_inputs(&data, cfg.profile_samples);
    if samples.is_empty() {
        return Err(Error::config("no validation samples to profile"));
    }
    let k = EnergyConstants::default();
    let ann = profile_ann(&teacher, &samples[0], &k)?;
    let snn = profile_snn(&student, &samples, &k)?.with_ann(&ann);
    let mut out = CommandOutput::default();
    out.files
        .push(write(&dir.join("energy_snn.txt"), snn.to_table())?);
    out.files
        .push(write(&dir.join("energy_snn.csv"), snn.to_csv())?);
    out.files
        .push(write(&dir.join("energy_ann.txt"), ann.to_table())?);
    out.files
        .push(write(&dir.join("energy_ann.csv"), ann.to_csv())?);
    out.files
        .push(write(&dir.join("energy_summary.json"), snn.summary_json())?);
    let ratio = snn.ratio_vs_ann().unwrap_or(f64::NAN);
    out.summary = format!(
        "profile: snn {:.4} uJ, ann {:.4} uJ, ratio {ratio:.4}, mean fr {:.4}\n",
        snn.total_uj(),
        ann.total_uj(),
        snn.mean_fr
    );
    Ok((out, ratio))
}

/// Restore `input` with the student and write the result to `output`.
pub fn cmd_denoise(cfg: &RunConfig) -> Result<CommandOutput> {
    cfg.validate()?;
    let input = require(&cfg.input, "input", "for denoise")?;
    let model = load_student(cfg)?;
    let img = data::load_image(input)?;
    let restored = model
        .forward(&img.to_tensor())?
        .restored
        .map(|v| v.clamp(0.0, 1.0));
    let output = match &cfg.output {
        Some(p) => p.clone(),
        None => out_dir(cfg)?.join(if img.channels == 1 {
            "denoised.pgm"
        } else {
            "denoised.ppm"
        }),
    };
    data::save_image(&ImageBuffer::from_tensor(&restored)?, &output)?;
    Ok(CommandOutput {
        summary: format!("denoise: wrote {}\n", output.display()),
        files: vec![output],
    })
}

/// One student run of the stage sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub arm: StageSet,
    pub sigma: u32,
    pub seed: u64,
    pub input_psnr: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub epochs_to_target: Option<usize>,
    pub volt_density: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub output: CommandOutput,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn mean_psnr(&self, arm: StageSet, sigma: Option<u32>) -> f64 {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.arm == arm && sigma.is_none_or(|s| c.sigma == s))
            .map(|c| c.psnr)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Mean epochs-to-target of `arm`; `None` if any run never got there.
    pub fn mean_epochs_to_target(&self, arm: StageSet) -> Option<f64> {
        let v: Option<Vec<usize>> = self
            .cells
            .iter()
            .filter(|c| c.arm == arm)
            .map(|c| c.epochs_to_target)
            .collect();
        v.filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<usize>() as f64 / v.len() as f64)
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "arm,stages,sigma,seed,input_psnr,psnr,ssim,epochs_to_target,volt_density";

/// Train one shared teacher per noise level and seed, then a student for
/// every distillation arm, and tabulate the results.
pub fn cmd_sweep_stages(cfg: &RunConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let jobs: Vec<(u32, u64)> = cfg
        .sweep_sigmas
        .iter()
        .flat_map(|&s| cfg.sweep_seeds.iter().map(move |&k| (s, k)))
        .collect();
    let prepared: Vec<(Dataset, ModelGraph)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(sigma, seed)| -> Result<(Dataset, ModelGraph)> {
                let data = dataset(cfg, sigma, seed)?;
                let mut teacher = build_teacher(&cfg.teacher_config(), seed)?;
                distill::train_teacher(
                    &mut teacher,
                    &data,
                    &cfg.train_config(cfg.teacher_epochs, seed),
                    |_| {},
                )?;
                log::info!("sweep: teacher sigma {sigma} seed {seed} trained");
                Ok((data, teacher))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let runs: Vec<(usize, StageSet)> = (0..jobs.len())
        .flat_map(|j| StageSet::ARMS.iter().map(move |&a| (j, a)))
        .collect();
    let results: Vec<(SweepCell, ModelGraph)> = pool.install(|| {
        runs.par_iter()
            .map(|&(j, arm)| -> Result<(SweepCell, ModelGraph)> {
                let (sigma, seed) = jobs[j];
                let (data, teacher) = &prepared[j];
                let kd = KdConfig {
                    stages: arm,
                    ..cfg.kd
                };
                let mut student = build_student(&cfg.student, seed)?;
                let run = distill::train_student(
                    &mut student,
                    Some(teacher),
                    data,
                    &kd,
                    &cfg.train_config(cfg.epochs, seed),
                    |_| {},
                )?;
                let input_psnr = data.input_psnr()?;
                let last = run.last().expect("at least one epoch");
                log::info!(
                    "sweep: arm {} sigma {sigma} seed {seed} psnr {:.3}",
                    arm.name(),
                    last.val_psnr
                );
                Ok((
                    SweepCell {
                        arm,
                        sigma,
                        seed,
                        input_psnr,
                        psnr: last.val_psnr,
                        ssim: last.val_ssim,
                        epochs_to_target: run.epochs_to_reach(input_psnr + CONVERGENCE_GAIN_DB),
                        volt_density: last.volt_density,
                    },
                    student,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = CommandOutput::default();
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    for (c, _) in &results {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.4},{:.4},{:.6},{},{:.6}",
            c.arm.name(),
            c.arm.label(),
            c.sigma,
            c.seed,
            c.input_psnr,
            c.psnr,
            c.ssim,
            c.epochs_to_target
                .map(|e| e.to_string())
                .unwrap_or_else(|| "none".into()),
            c.volt_density
        );
    }
    out.files.push(write(&dir.join("sweep.csv"), csv)?);
    // membrane histograms of every arm for the first noise level and seed
    let (data0, _) = &prepared[0];
    let samples = val_inputs(data0, cfg.profile_samples);
    for (c, student) in results.iter().filter(|(c, _)| (c.sigma, c.seed) == jobs[0]) {
        let (rows, _) = membrane_histograms(student, &samples)?;
        out.files.push(write(
            &dir.join(format!("membrane_{}.csv", c.arm.name())),
            histogram_csv(&rows),
        )?);
    }
    let result = SweepResult {
        output: CommandOutput::default(),
        cells: results.into_iter().map(|(c, _)| c).collect(),
    };
    let table = sweep_table(cfg, &result);
    out.files.push(write(&dir.join("sweep_table.txt"), &table)?);
    out.summary = table;
    Ok(SweepResult {
        output: out,
        cells: result.cells,
    })
}

/// Distillation arms as rows and noise levels as columns, each cell the mean
/// PSNR/SSIM over seeds.
pub fn sweep_table(cfg: &RunConfig, r: &SweepResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "stage sweep: gamma {} over {} seed(s), {} student epochs, {} teacher epochs",
        cfg.kd.gamma,
        cfg.sweep_seeds.len(),
        cfg.epochs,
        cfg.teacher_epochs
    );
    let _ = write!(s, "{:<8}", "stages");
    for sigma in &cfg.sweep_sigmas {
        let _ = write!(s, " | {:>16}", format!("sigma {sigma}"));
    }
    s.push('\n');
    let mut by_cell: BTreeMap<(usize, u32), (f64, f64, usize)> = BTreeMap::new();
    for c in &r.cells {
        let arm = StageSet::ARMS
            .iter()
            .position(|&a| a == c.arm)
            .expect("known arm");
        let e = by_cell.entry((arm, c.sigma)).or_default();
        e.0 += c.psnr;
        e.1 += c.ssim;
        e.2 += 1;
    }
    for (i, arm) in StageSet::ARMS.iter().enumerate() {
        let _ = write!(s, "{:<8}", arm.label());
        for &sigma in &cfg.sweep_sigmas {
            let (p, q, n) = by_cell.get(&(i, sigma)).copied().unwrap_or_default();
            let n = n.max(1) as f64;
            let _ = write!(s, " | {:>16}", format!("{:.2}/{:.4}", p / n, q / n));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "mean epochs to reach input + {CONVERGENCE_GAIN_DB} dB:");
    for arm in StageSet::ARMS {
        let e = r
            .mean_epochs_to_target(arm)
            .map(|e| format!("{e:.2}"))
            .unwrap_or_else(|| "not reached".into());
        let _ = writeln!(s, "  {:<8} {e}", arm.label());
    }
    match (
        r.mean_epochs_to_target(StageSet::None),
        r.mean_epochs_to_target(StageSet::Decoder),
    ) {
        (Some(a), Some(b)) if b > 0.0 => {
            let _ = writeln!(
                s,
                "convergence ratio (no distillation / decoder distillation): {:.3}",
                a / b
            );
        }
        (Some(a), Some(_)) => {
            let _ = writeln!(s, "convergence ratio: decoder distillation reached the target at epoch 0, none at {a:.2}");
        }
        _ => {
            let _ = writeln!(
                s,
                "convergence ratio: undefined (an arm never reached the target)"
            );
        }
    }
    s
}
