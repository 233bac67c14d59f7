mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// One-step diffusion restoration with adaptive inversion and generative
/// steering, at toy scale.
#[derive(Debug, Parser)]
#[command(name = "idas", version, about, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration and output options shared by every subcommand.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Output directory.
    #[arg(long, env = "IDAS_OUT_DIR", default_value = "runs")]
    pub out: PathBuf,

    /// Flat TOML config file; keys are the `RunConfig` field names.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set batch_size=4`. Repeatable; wins
    /// over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Proceed even when the config fingerprint differs from the checkpoint's.
    #[arg(long)]
    pub force: bool,

    /// Log every N iterations during training.
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

/// Where evaluation pairs come from.
#[derive(Debug, Args, Clone)]
pub struct EvalSet {
    /// Dataset directory written by `synth-data`; procedural pairs from the
    /// evaluation stream are used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Number of procedural evaluation pairs (defaults to `eval_images`).
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize clean/degraded pairs into `<out>/data`.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Number of pairs.
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Directory of clean PNGs to degrade instead of procedural images.
        #[arg(long)]
        clean_dir: Option<PathBuf>,
    },
    /// Pretrain the toy diffusion prior; writes `<out>/prior.safetensors`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory of clean PNGs to train on instead of procedural images.
        #[arg(long)]
        clean_dir: Option<PathBuf>,
    },
    /// Distill the one-step restorer; writes `<out>/model.safetensors`.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Pretrained prior checkpoint.
        #[arg(long, required_unless_present = "resume")]
        prior: Option<PathBuf>,
        /// Resume from a distillation checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory of clean PNGs to train on instead of procedural images.
        #[arg(long)]
        clean_dir: Option<PathBuf>,
    },
    /// Restore LQ images; writes PNGs plus one JSON sidecar per image.
    Restore {
        #[command(flatten)]
        common: Common,
        /// Distilled model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// A PNG file or a directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for restored images.
        #[arg(long)]
        output: PathBuf,
        /// Generative steering in [0, 1]; defaults to the config's `s`.
        #[arg(long)]
        steer: Option<f64>,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the predicted timestep with a constant (fresh noise anchor).
        #[arg(long)]
        fixed_t: Option<f64>,
    },
    /// PSNR/SSIM/sharpness across steering values.
    SweepS {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalSet,
        /// Comma-separated steering values.
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6,0.9")]
        s_list: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR/SSIM/sharpness with the timestep overridden to fixed values.
    SweepT {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalSet,
        /// Comma-separated fixed timesteps.
        #[arg(long, value_delimiter = ',', default_value = "50,150,250,350,450")]
        t_list: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distribution of predicted timesteps over an evaluation set.
    AnalyzeTimesteps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eval: EvalSet,
    },
    /// Run the property checks that need no trained model.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
