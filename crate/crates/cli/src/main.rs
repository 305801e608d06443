use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikeir::commands;
use spikeir::config::{load_config, RunConfig};
use spikeir::Error;

#[derive(Parser)]
#[command(
    name = "spikeir",
    version,
    about = "Spiking image restoration with feature distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the non-spiking teacher.
    TrainTeacher(Common),
    /// Train the spiking student, distilling from a teacher checkpoint.
    TrainStudent(Common),
    /// PSNR/SSIM of a student checkpoint, or of the degraded inputs.
    Eval(Common),
    /// Energy reports for the student and its analog twin.
    Profile(Common),
    /// Train every distillation arm over noise levels and seeds.
    SweepStages(Common),
    /// Restore a single image.
    Denoise(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Distilled stages.
    #[arg(long, value_parser = ["all", "mid", "decoder", "none"])]
    kd: Option<String>,
    /// Distillation weight.
    #[arg(long, value_name = "F")]
    gamma: Option<f32>,
    /// Frequency loss weight.
    #[arg(long, value_name = "F")]
    lambda: Option<f32>,
    #[arg(long, value_name = "N")]
    timesteps: Option<usize>,
    /// Noise level.
    #[arg(long, value_parser = ["15", "25", "50"])]
    sigma: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> spikeir::Result<RunConfig> {
        let mut cfg = load_config(&self.config)?;
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("kd", self.kd.clone()),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("timesteps", self.timesteps.map(|v| v.to_string())),
            ("sigma", self.sigma.clone()),
            (
                "out_dir",
                self.out.as_ref().map(|p| p.display().to_string()),
            ),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.apply_override(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainTeacher(c)
            | Command::TrainStudent(c)
            | Command::Eval(c)
            | Command::Profile(c)
            | Command::SweepStages(c)
            | Command::Denoise(c) => c,
        }
    }
}

fn run(cli: Cli) -> spikeir::Result<String> {
    let cfg = cli.command.common().load()?;
    let out = match cli.command {
        Command::TrainTeacher(_) => commands::cmd_train_teacher(&cfg)?.output,
        Command::TrainStudent(_) => commands::cmd_train_student(&cfg)?.output,
        Command::Eval(_) => commands::cmd_eval(&cfg)?.0,
        Command::Profile(_) => commands::cmd_profile(&cfg)?.0,
        Command::SweepStages(_) => commands::cmd_sweep_stages(&cfg)?.output,
        Command::Denoise(_) => commands::cmd_denoise(&cfg)?,
    };
    let mut text = format!("seed {} sigma {}\n{}", cfg.seed, cfg.sigma, out.summary);
    for f in out.files {
        text.push_str(&format!("wrote {}\n", f.display()));
    }
    Ok(text)
}

/// Exit status per error family; 2 is left to argument parsing.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ConfigLine { .. } => 3,
        Error::Io { .. } | Error::Parse { .. } => 4,
        Error::BadMagic(_)
        | Error::BadVersion(_)
        | Error::Checksum { .. }
        | Error::Manifest { .. }
        | Error::Truncated => 5,
        Error::Dimension(_) | Error::Contract(_) | Error::Numeric(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("spikeir: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
