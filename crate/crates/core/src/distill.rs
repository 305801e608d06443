//! Restoration loss, teacher-to-student feature distillation, and the
//! training loops for both networks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
pub use crate::data::Dataset;
use crate::data::{augment_flip, PatchPair};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{FeatureTapSet, ModelGraph, StageId};
use crate::optim::{adamw_step, AdamWConfig, CosineSchedule, OptimState};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_freq: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_freq: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_freq >= 0.0 && self.lambda_freq.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be >= 0, got {}",
                self.lambda_freq
            )));
        }
        Ok(())
    }
}

/// Pixel L1 plus `lambda` times the L1 of the half-spectrum difference, both
/// mean-reduced. Each complex bin contributes `|Re| + |Im|` and the spectral
/// mean runs over `2 * bins` real components.
pub fn restoration_loss_tape(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    w: LossWeights,
) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let a = tape.abs(diff)?;
    let pixel = tape.mean_all(a)?;
    if w.lambda_freq == 0.0 {
        return Ok(pixel);
    }
    let spec = tape.rdft2(diff)?;
    let sa = tape.abs(spec)?;
    let freq = tape.mean_all(sa)?;
    let freq = tape.scale(freq, w.lambda_freq)?;
    tape.add(pixel, freq)
}

pub fn restoration_loss(pred: &Tensor, target: &Tensor, w: LossWeights) -> Result<f32> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = restoration_loss_tape(&mut tape, p, t, w)?;
    tape.value(l).item()
}

/// Resize the teacher tap to the student's spatial size, then pool its
/// channels down to the student's width.
pub fn align_feature(student_tap: &Tensor, teacher_tap: &Tensor) -> Result<Tensor> {
    let [_, cs, hs, ws] = student_tap.shape();
    let resized = tensor::bilinear_resize(teacher_tap, hs, ws)?;
    tensor::channel_avg_pool(&resized, cs)
}

/// Which stage taps are distilled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StageSet {
    /// Stages 1 to 7.
    All,
    /// Stages 3 to 5.
    Mid,
    /// Stages 4 to 7.
    #[default]
    Decoder,
    None,
}

impl StageSet {
    pub const ARMS: [StageSet; 4] = [
        StageSet::All,
        StageSet::Mid,
        StageSet::Decoder,
        StageSet::None,
    ];

    pub fn stages(self) -> Vec<StageId> {
        let range = match self {
            StageSet::All => 1..=7,
            StageSet::Mid => 3..=5,
            StageSet::Decoder => 4..=7,
            StageSet::None => return Vec::new(),
        };
        range
            .map(|s| StageId::new(s).expect("stage in range"))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            StageSet::All => "all",
            StageSet::Mid => "mid",
            StageSet::Decoder => "decoder",
            StageSet::None => "none",
        }
    }

    /// Stage range label such as `4->7`.
    pub fn label(self) -> &'static str {
        match self {
            StageSet::All => "1->7",
            StageSet::Mid => "3->5",
            StageSet::Decoder => "4->7",
            StageSet::None => "none",
        }
    }
}

impl FromStr for StageSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(StageSet::All),
            "mid" => Ok(StageSet::Mid),
            "decoder" => Ok(StageSet::Decoder),
            "none" => Ok(StageSet::None),
            other => Err(Error::config(format!(
                "unknown stage set '{other}'; expected all, mid, decoder or none"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdConfig {
    pub gamma: f32,
    pub stages: StageSet,
    /// Sum the per-stage terms instead of averaging them.
    pub sum: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            gamma: 0.12,
            stages: StageSet::Decoder,
            sum: false,
        }
    }
}

impl KdConfig {
    pub fn none() -> Self {
        KdConfig {
            stages: StageSet::None,
            ..KdConfig::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.stages != StageSet::None
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    fn stage_weight(&self, n: usize) -> f32 {
        if self.sum {
            self.gamma
        } else {
            self.gamma / n as f32
        }
    }
}

fn missing(which: &str, s: StageId) -> Error {
    Error::contract(format!("{which} taps lack stage {}", s.get()))
}

/// Distillation term on the tape; `None` when no stage is selected.
pub fn kd_loss_tape(
    tape: &mut Tape,
    student_taps: &BTreeMap<StageId, Var>,
    teacher_taps: &FeatureTapSet,
    cfg: &KdConfig,
) -> Result<Option<Var>> {
    let stages = cfg.stages.stages();
    if stages.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for &s in &stages {
        let sv = *student_taps.get(&s).ok_or_else(|| missing("student", s))?;
        let tv = teacher_taps.get(&s).ok_or_else(|| missing("teacher", s))?;
        let aligned = align_feature(tape.value(sv), tv)?;
        let target = tape.constant(aligned);
        let d = tape.sub(sv, target)?;
        let sq = tape.square(d)?;
        let m = tape.mean_all(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let total = total.expect("non-empty stage list");
    Ok(Some(tape.scale(total, cfg.stage_weight(stages.len()))?))
}

pub fn kd_loss(
    student_taps: &FeatureTapSet,
    teacher_taps: &FeatureTapSet,
    cfg: &KdConfig,
) -> Result<f32> {
    let mut tape = Tape::new();
    let vars: BTreeMap<StageId, Var> = student_taps
        .iter()
        .map(|(&s, t)| (s, tape.constant(t.clone())))
        .collect();
    match kd_loss_tape(&mut tape, &vars, teacher_taps, cfg)? {
        Some(v) => tape.value(v).item(),
        None => Ok(0.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_max: f32,
    pub lr_min: f32,
    pub adamw: AdamWConfig,
    pub weights: LossWeights,
    pub augment: bool,
    /// End training after the first epoch whose validation PSNR reaches this.
    pub stop_at_psnr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 51,
            batch_size: 8,
            seed: 0,
            lr_max: 5e-4,
            lr_min: 1e-5,
            adamw: AdamWConfig::default(),
            weights: LossWeights::default(),
            augment: true,
            stop_at_psnr: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        self.weights.validate()
    }
}

pub(crate) fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_restore: f64,
    pub loss_kd: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub mean_fr: f64,
    pub volt_density: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_CSV_HEADER: &str =
    "epoch,loss_restore,loss_kd,val_psnr,val_ssim,mean_fr,volt_density,seconds";

impl TrainRun {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.4},{:.6},{:.6},{:.6},{:.3}",
                r.epoch,
                r.loss_restore,
                r.loss_kd,
                r.val_psnr,
                r.val_ssim,
                r.mean_fr,
                r.volt_density,
                r.seconds
            );
        }
        s
    }

    /// First epoch whose validation PSNR reaches `target_db`.
    pub fn epochs_to_reach(&self, target_db: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.val_psnr >= target_db)
            .map(|r| r.epoch)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Validation metrics of `model` on `pairs`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub psnr: f64,
    pub ssim: f64,
    pub mean_fr: f64,
    pub volt_density: f64,
}

pub fn evaluate(model: &ModelGraph, pairs: &[PatchPair]) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    if pairs.is_empty() {
        return Ok(ev);
    }
    let v_th = model.lif_params().map(|p| p.v_th);
    for p in pairs {
        let out = model.forward(&p.noisy)?;
        ev.psnr += metrics::psnr(&out.restored, &p.clean)?;
        ev.ssim += metrics::ssim(&out.restored, &p.clean)?;
        ev.mean_fr += out.stats.mean_firing_rate() as f64;
        if let Some(v_th) = v_th {
            ev.volt_density += out.stats.voltage_density(v_th) as f64;
        }
    }
    let n = pairs.len() as f64;
    ev.psnr /= n;
    ev.ssim /= n;
    ev.mean_fr /= n;
    ev.volt_density /= n;
    Ok(ev)
}

/// Frozen teacher plus distillation settings.
#[derive(Clone, Copy)]
pub struct Distill<'a> {
    pub teacher: &'a ModelGraph,
    pub kd: KdConfig,
}

fn numeric_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} step {step}: {msg}")),
        other => other,
    }
}

/// Train `model` in place. Each optimizer update averages the gradients of
/// `batch_size` sequentially processed patches.
pub fn train_model(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    distill: Option<Distill<'_>>,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(d) = &distill {
        d.kd.validate()?;
        if d.teacher.is_spiking() {
            return Err(Error::config(
                "the distillation teacher must be the analog network",
            ));
        }
    }
    let distill = distill.filter(|d| d.kd.is_active());
    let schedule = cfg.schedule();
    let mut opt = OptimState::new(&model.params().tensors(), cfg.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut run = TrainRun::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = schedule.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let (mut sum_restore, mut sum_kd) = (0.0f64, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Tensor> = model
                .params()
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect();
            for &i in batch {
                let pair = if cfg.augment {
                    augment_flip(&data.train[i], &mut rng)
                } else {
                    data.train[i].clone()
                };
                let (lr_, lk) = sample_gradients(model, &pair, cfg.weights, distill, &mut acc)
                    .map_err(|e| numeric_context(e, epoch, step))?;
                sum_restore += lr_;
                sum_kd += lk;
            }
            let inv = 1.0 / batch.len() as f32;
            for g in &mut acc {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let mut params = model.params().tensors();
            adamw_step(&mut params, &acc, &mut opt, lr)
                .map_err(|e| numeric_context(e, epoch, step))?;
            model.params_mut().assign(params)?;
            step += 1;
        }
        let ev = evaluate(model, &data.val).map_err(|e| numeric_context(e, epoch, step))?;
        let n = data.train.len() as f64;
        let rec = EpochRecord {
            epoch,
            loss_restore: sum_restore / n,
            loss_kd: sum_kd / n,
            val_psnr: ev.psnr,
            val_ssim: ev.ssim,
            mean_fr: ev.mean_fr,
            volt_density: ev.volt_density,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&rec);
        let reached = cfg.stop_at_psnr.is_some_and(|t| rec.val_psnr >= t);
        run.records.push(rec);
        if reached {
            break;
        }
    }
    Ok(run)
}

/// Add one patch's parameter gradients to `acc`; returns the restoration and
/// distillation loss values.
fn sample_gradients(
    model: &ModelGraph,
    pair: &PatchPair,
    w: LossWeights,
    distill: Option<Distill<'_>>,
    acc: &mut [Tensor],
) -> Result<(f64, f64)> {
    let teacher_taps = match distill {
        Some(d) => Some(d.teacher.forward(&pair.noisy)?.taps),
        None => None,
    };
    let mut tape = Tape::new();
    let (fwd, _) = model.forward_tape(&mut tape, &pair.noisy, true)?;
    if fwd.pad != (0, 0) {
        return Err(Error::config(format!(
            "training patches must be multiples of {} pixels",
            model.spatial_multiple
        )));
    }
    let target = tape.constant(pair.clean.clone());
    let restore = restoration_loss_tape(&mut tape, fwd.output, target, w)?;
    let mut loss = restore;
    let mut kd_value = 0.0;
    if let (Some(d), Some(tt)) = (distill, &teacher_taps) {
        if let Some(kd) = kd_loss_tape(&mut tape, &fwd.taps, tt, &d.kd)? {
            kd_value = tape.value(kd).item()? as f64;
            loss = tape.add(restore, kd)?;
        }
    }
    let restore_value = tape.value(restore).item()? as f64;
    let grads = tape.backward(loss)?;
    for (a, &p) in acc.iter_mut().zip(&fwd.params) {
        if let Some(g) = grads.get(p) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    Ok((restore_value, kd_value))
}

/// Train the analog teacher on the restoration loss alone.
pub fn train_teacher(
    teacher: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    if teacher.is_spiking() {
        return Err(Error::config("train_teacher expects the analog network"));
    }
    train_model(teacher, data, cfg, None, observer)
}

/// Train the spiking student, optionally distilling from a frozen teacher.
pub fn train_student(
    student: &mut ModelGraph,
    teacher: Option<&ModelGraph>,
    data: &Dataset,
    kd: &KdConfig,
    cfg: &TrainConfig,
    observer: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    let distill = match teacher {
        Some(t) => Some(Distill {
            teacher: t,
            kd: *kd,
        }),
        None if kd.is_active() => {
            return Err(Error::config(format!(
                "distillation over stages {} needs a teacher",
                kd.stages.label()
            )))
        }
        None => None,
    };
    train_model(student, data, cfg, distill, observer)
}
