//! `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::distill::{KdConfig, LossWeights, StageSet, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{StudentConfig, TeacherConfig};
use crate::neuron::Reset;

/// Denoising presets on the 0-255 noise scale.
pub const SIGMAS: [u32; 3] = [15, 25, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub sigma: u32,
    pub seed: u64,
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub batch_size: usize,
    pub lr_max: f32,
    pub lr_min: f32,
    pub weight_decay: f32,
    pub augment: bool,
    pub loss: LossWeights,
    pub kd: KdConfig,
    pub student: StudentConfig,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Lines of `degraded clean` path pairs for `eval`.
    pub eval_manifest: Option<PathBuf>,
    pub synthetic_train_images: usize,
    pub synthetic_val_images: usize,
    pub synthetic_size: usize,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub profile_samples: usize,
    pub sweep_seeds: Vec<u64>,
    pub sweep_sigmas: Vec<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sigma: 15,
            seed: 0,
            epochs: 51,
            teacher_epochs: 51,
            batch_size: 8,
            lr_max: 5e-4,
            lr_min: 1e-5,
            weight_decay: 0.05,
            augment: true,
            loss: LossWeights::default(),
            kd: KdConfig::default(),
            student: StudentConfig::default(),
            patch_size: 32,
            patches_per_image: 8,
            train_manifest: None,
            val_manifest: None,
            eval_manifest: None,
            synthetic_train_images: 25,
            synthetic_val_images: 4,
            synthetic_size: 64,
            teacher_checkpoint: None,
            student_checkpoint: None,
            input: None,
            output: None,
            out_dir: PathBuf::from("out"),
            profile_samples: 4,
            sweep_seeds: vec![0, 1, 2],
            sweep_sigmas: SIGMAS.to_vec(),
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got '{v}'")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got '{v}'"))
}

fn parse_list<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(|p| parse_num(p.trim(), what)).collect()
}

fn parse_sigma(v: &str) -> std::result::Result<u32, String> {
    let s: u32 = parse_num(v, "a noise level")?;
    if SIGMAS.contains(&s) {
        Ok(s)
    } else {
        Err(format!("noise level must be one of 15, 25, 50, got {s}"))
    }
}

fn path(v: &str) -> Option<PathBuf> {
    if v.is_empty() {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "task" => {
                self.sigma = match v {
                    "denoise-sigma15" => 15,
                    "denoise-sigma25" => 25,
                    "denoise-sigma50" => 50,
                    _ => return Err(format!("unknown task '{v}'")),
                };
                self.epochs = 51;
            }
            "sigma" => self.sigma = parse_sigma(v)?,
            "seed" => self.seed = parse_num(v, "an unsigned integer")?,
            "epochs" => self.epochs = parse_num(v, "an epoch count")?,
            "teacher_epochs" => self.teacher_epochs = parse_num(v, "an epoch count")?,
            "batch_size" => self.batch_size = parse_num(v, "a batch size")?,
            "lr_max" => self.lr_max = parse_num(v, "a number")?,
            "lr_min" => self.lr_min = parse_num(v, "a number")?,
            "weight_decay" => self.weight_decay = parse_num(v, "a number")?,
            "augment" => self.augment = parse_bool(v)?,
            "lambda" => self.loss.lambda_freq = parse_num(v, "a number")?,
            "gamma" => self.kd.gamma = parse_num(v, "a number")?,
            "kd" => self.kd.stages = v.parse::<StageSet>().map_err(|e| e.to_string())?,
            "kd_sum" => self.kd.sum = parse_bool(v)?,
            "timesteps" => self.student.timesteps = parse_num(v, "a step count")?,
            "levels" => self.student.levels = parse_num(v, "a level count")?,
            "channels" => self.student.channels = parse_list(v, "channel counts")?,
            "blocks_per_level" => self.student.blocks_per_level = parse_num(v, "a block count")?,
            "kernel" => self.student.kernel = parse_num(v, "a kernel size")?,
            "image_channels" => self.student.image_channels = parse_num(v, "1 or 3")?,
            "attention" => self.student.attention = parse_bool(v)?,
            "zero_tail" => self.student.zero_tail = parse_bool(v)?,
            "beta" => self.student.lif.beta = parse_num(v, "a number")?,
            "v_th" => self.student.lif.v_th = parse_num(v, "a number")?,
            "surrogate_alpha" => self.student.lif.surrogate_alpha = parse_num(v, "a number")?,
            "reset" => {
                self.student.lif.reset = match v {
                    "soft" => Reset::Soft,
                    "hard" => Reset::Hard,
                    _ => return Err(format!("expected soft or hard, got '{v}'")),
                }
            }
            "patch_size" => self.patch_size = parse_num(v, "a patch size")?,
            "patches_per_image" => self.patches_per_image = parse_num(v, "a patch count")?,
            "train_manifest" => self.train_manifest = path(v),
            "val_manifest" => self.val_manifest = path(v),
            "eval_manifest" => self.eval_manifest = path(v),
            "synthetic_train_images" => {
                self.synthetic_train_images = parse_num(v, "an image count")?
            }
            "synthetic_val_images" => self.synthetic_val_images = parse_num(v, "an image count")?,
            "synthetic_size" => self.synthetic_size = parse_num(v, "an image size")?,
            "teacher_checkpoint" => self.teacher_checkpoint = path(v),
            "student_checkpoint" => self.student_checkpoint = path(v),
            "input" => self.input = path(v),
            "output" => self.output = path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "profile_samples" => self.profile_samples = parse_num(v, "a sample count")?,
            "sweep_seeds" => self.sweep_seeds = parse_list(v, "seeds")?,
            "sweep_sigmas" => {
                self.sweep_sigmas = v
                    .split(',')
                    .map(|s| parse_sigma(s.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Apply one override given on the command line.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value)
            .map_err(|msg| Error::config(format!("--{}: {msg}", key.replace('_', "-"))))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.teacher_epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.student.timesteps == 0 {
            return Err(Error::config("timesteps must be >= 1"));
        }
        if self.profile_samples == 0 {
            return Err(Error::config("profile_samples must be >= 1"));
        }
        if self.sweep_seeds.is_empty() || self.sweep_sigmas.is_empty() {
            return Err(Error::config(
                "sweep needs at least one seed and one noise level",
            ));
        }
        self.student.lif.validate()?;
        self.kd.validate()?;
        self.train_config(self.epochs, self.seed).validate()
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        self.student.teacher()
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        let mut t = TrainConfig {
            epochs,
            batch_size: self.batch_size,
            seed,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            weights: self.loss,
            augment: self.augment,
            ..TrainConfig::default()
        };
        t.adamw.weight_decay = self.weight_decay;
        t
    }

    pub fn synthetic_spec(&self, sigma: u32, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            train_images: self.synthetic_train_images,
            val_images: self.synthetic_val_images,
            image_size: self.synthetic_size,
            patch: self.patch_size,
            patches_per_image: self.patches_per_image,
            sigma: sigma as f32,
            seed,
        }
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn to_text(&self) -> String {
        let s = &self.student;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("sigma", self.sigma.to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("teacher_epochs", self.teacher_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr_max", self.lr_max.to_string());
        kv("lr_min", self.lr_min.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("augment", self.augment.to_string());
        kv("lambda", self.loss.lambda_freq.to_string());
        kv("gamma", self.kd.gamma.to_string());
        kv("kd", self.kd.stages.name().to_string());
        kv("kd_sum", self.kd.sum.to_string());
        kv("timesteps", s.timesteps.to_string());
        kv("levels", s.levels.to_string());
        kv("channels", join(&s.channels));
        kv("blocks_per_level", s.blocks_per_level.to_string());
        kv("kernel", s.kernel.to_string());
        kv("image_channels", s.image_channels.to_string());
        kv("attention", s.attention.to_string());
        kv("zero_tail", s.zero_tail.to_string());
        kv("beta", s.lif.beta.to_string());
        kv("v_th", s.lif.v_th.to_string());
        kv("surrogate_alpha", s.lif.surrogate_alpha.to_string());
        kv(
            "reset",
            match s.lif.reset {
                Reset::Soft => "soft",
                Reset::Hard => "hard",
            }
            .to_string(),
        );
        kv("patch_size", self.patch_size.to_string());
        kv("patches_per_image", self.patches_per_image.to_string());
        kv("train_manifest", show_path(&self.train_manifest));
        kv("val_manifest", show_path(&self.val_manifest));
        kv("eval_manifest", show_path(&self.eval_manifest));
        kv(
            "synthetic_train_images",
            self.synthetic_train_images.to_string(),
        );
        kv(
            "synthetic_val_images",
            self.synthetic_val_images.to_string(),
        );
        kv("synthetic_size", self.synthetic_size.to_string());
        kv("teacher_checkpoint", show_path(&self.teacher_checkpoint));
        kv("student_checkpoint", show_path(&self.student_checkpoint));
        kv("input", show_path(&self.input));
        kv("output", show_path(&self.output));
        kv("out_dir", self.out_dir.display().to_string());
        kv("profile_samples", self.profile_samples.to_string());
        kv("sweep_seeds", join(&self.sweep_seeds));
        kv("sweep_sigmas", join(&self.sweep_sigmas));
        out
    }
}

/// Parse a configuration; errors cite 1-based line numbers.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
            line: line_no,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        cfg.set(key.trim(), value)
            .map_err(|msg| Error::ConfigLine { line: line_no, msg })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Read a configuration file. Relative input and checkpoint paths in it are
/// taken relative to the file; `out_dir` stays relative to the working
/// directory.
pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(std::path::Path::new(""));
    for p in [
        &mut cfg.train_manifest,
        &mut cfg.val_manifest,
        &mut cfg.eval_manifest,
        &mut cfg.teacher_checkpoint,
        &mut cfg.student_checkpoint,
        &mut cfg.input,
        &mut cfg.output,
    ]
    .into_iter()
    .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}
