mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcpnet::eval::{AblationTable, NoiseLevel};
use gcpnet::{Error, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "gcpnet", version, about = "Burst raw denoising and demosaicking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration (schema_version = 1).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frames per burst.
    #[arg(long)]
    frames: Option<usize>,
    /// Override any config field, e.g. `--set train.lr0=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize noisy raw bursts from clips.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        noise_level: Option<NoiseLevel>,
        /// Write clean mosaics.
        #[arg(long, conflicts_with = "noise_level")]
        zero_noise: bool,
    },
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth itself.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        noise_level: Option<NoiseLevel>,
    },
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: AblationTable,
    },
    /// Restore a burst written by `synth`.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Burst directory with frames.gcpb and maps.gcpb.
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-channel SNR of synthesized raw images.
    Snr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        noise_level: Option<NoiseLevel>,
    },
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.sets)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(n) = self.frames {
            cfg.model.frames = n;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<PathBuf> {
        self.out.clone().ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { common, noise_level, zero_noise } => {
            commands::synth(&common.load()?, &common.out()?, noise_level, zero_noise)
        }
        Cmd::Train { common, checkpoint } => commands::train(&common.load()?, &common.out()?, checkpoint.as_deref()),
        Cmd::Eval { common, checkpoint, oracle, noise_level } => {
            let out = common.out()?;
            commands::eval(&common.load()?, &out, checkpoint.as_deref(), oracle, noise_level)?;
            print!("{}", std::fs::read_to_string(out.join("results.txt"))?);
            Ok(())
        }
        Cmd::Ablate { common, table } => {
            let out = common.out()?;
            commands::ablate(&common.load()?, &out, table)?;
            print!("{}", std::fs::read_to_string(out.join(format!("ablation_{}.txt", table.name())))?);
            Ok(())
        }
        Cmd::Infer { common, checkpoint, input } => {
            let png = commands::infer(&common.load()?, &input, &checkpoint, &common.out()?)?;
            println!("{}", png.display());
            Ok(())
        }
        Cmd::Snr { common, noise_level } => {
            let frac = commands::snr(&common.load()?, &common.out()?, noise_level)?;
            println!("green SNR is the maximum in {:.1}% of images", 100.0 * frac);
            Ok(())
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
