//! Command-line front end for rankfold.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rankfold::{EncoderSpec, Preset, RankPolicy, DEFAULT_GRANULARITY};

pub mod commands;

/// Environment variable that fixes the worker thread count.
pub const THREADS_ENV: &str = "RANKFOLD_THREADS";

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "rankfold", version, about = "Calibration-driven low-rank compression of Transformer encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a randomly initialized encoder.
    Synth(SynthArgs),
    /// Write synthetic low-rank calibration clips.
    GenCalib(GenCalibArgs),
    /// Collect activation statistics for every linear layer.
    Calibrate(CalibrateArgs),
    /// Choose ranks and factorize the encoder.
    Compress(CompressArgs),
    /// Compare a compressed encoder against its original.
    Verify(VerifyArgs),
    /// Compress and verify over a grid of thresholds and write CSV.
    Sweep(SweepArgs),
    /// Print the MAC and parameter report of a compressed encoder.
    Report(ReportArgs),
    /// Run synth, gen-calib, calibrate, compress and verify in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SpecArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub dmodel: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub dff: usize,
    /// Sequence length seen by the attention layers.
    #[arg(long, default_value_t = 64)]
    pub seqlen: usize,
    /// Add a two-layer convolutional front end taking `n_mels` features.
    #[arg(long, value_name = "N_MELS")]
    pub conv_stem: Option<usize>,
}

impl SpecArgs {
    pub fn spec(&self) -> anyhow::Result<EncoderSpec> {
        let mut spec = EncoderSpec::new(self.layers, self.dmodel, self.heads, self.dff, self.seqlen);
        if let Some(n_mels) = self.conv_stem {
            spec = spec.with_conv_stem(n_mels);
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store weights as 32-bit floats.
    #[arg(long)]
    pub f32: bool,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenCalibArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Take the encoder shape from this model archive instead of the shape flags.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Effective rank of the clips.
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Index of the first clip; clips past a calibration set are held out from it.
    #[arg(long, default_value_t = 0)]
    pub offset: u64,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// Named configuration: a (quality), b (balanced) or c (efficiency).
    #[arg(long, conflicts_with_all = ["theta_attn", "theta_mlp"])]
    pub preset: Option<Preset>,
    #[arg(long, requires = "theta_mlp")]
    pub theta_attn: Option<f64>,
    #[arg(long, requires = "theta_attn")]
    pub theta_mlp: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_GRANULARITY)]
    pub granularity: usize,
}

impl PolicyArgs {
    pub fn policy(&self) -> anyhow::Result<RankPolicy> {
        let policy = match (self.preset, self.theta_attn, self.theta_mlp) {
            (Some(p), None, None) => RankPolicy::preset(p).with_granularity(self.granularity),
            (None, Some(a), Some(m)) => RankPolicy { theta_attn: a, theta_mlp: m, granularity: self.granularity },
            (None, None, None) => bail!(rankfold::Error::Usage("give --preset or both --theta-attn and --theta-mlp".into())),
            _ => bail!(rankfold::Error::Usage("--preset excludes explicit thresholds".into())),
        };
        policy.validate().map_err(|e| rankfold::Error::Usage(e.to_string()))?;
        Ok(policy)
    }
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    /// Evaluate on the clips of this archive instead of random probes.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    /// Number of standard normal probe inputs.
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub compressed: PathBuf,
    #[command(flatten)]
    pub probes: ProbeArgs,
    /// Largest accepted relative output error.
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    /// Comma-separated attention thresholds.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub theta_attn: Vec<f64>,
    /// Comma-separated MLP thresholds.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub theta_mlp: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_GRANULARITY)]
    pub granularity: usize,
    #[command(flatten)]
    pub probes: ProbeArgs,
    /// CSV destination; standard output when absent.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub compressed: PathBuf,
    #[arg(long)]
    pub json: bool,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Held-out clips used for verification.
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    /// Directory receiving every intermediate archive.
    #[arg(long)]
    pub dir: PathBuf,
}

/// Sizes the global thread pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Usage errors exit with 2, everything else with 1.
pub fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<rankfold::Error>() {
        Some(rankfold::Error::Usage(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<u8> {
    match cli.command {
        Command::Synth(a) => commands::synth(&a, out),
        Command::GenCalib(a) => commands::gen_calib(&a, out),
        Command::Calibrate(a) => commands::calibrate(&a, out),
        Command::Compress(a) => commands::compress(&a, out),
        Command::Verify(a) => commands::verify(&a, out),
        Command::Sweep(a) => commands::sweep(&a, out),
        Command::Report(a) => commands::report(&a, out),
        Command::Pipeline(a) => commands::pipeline(&a, out),
    }
}
