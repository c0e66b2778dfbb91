//! Command-line grammar.

use std::ops::RangeInclusive;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use siedd::model::Preset;
use siedd::quant::QuantMethod;
use siedd::trainer::Sampling;

#[derive(Debug, Parser)]
#[command(name = "siedd", version, about = "Implicit neural video codec with a shared encoder and per-group decoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on numbered PNG frames and write a .siedd file
    Encode(EncodeArgs),
    /// Reconstruct PNG frames from a .siedd file
    Decode(DecodeArgs),
    /// Compare two directories of frames
    Metrics(MetricsArgs),
    /// Print the header and section sizes of a .siedd file
    Info(InfoArgs),
    /// Run ablation sweeps and record every point
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    #[value(name = "S", alias = "s")]
    S,
    #[value(name = "M", alias = "m")]
    M,
    #[value(name = "L", alias = "l")]
    L,
    #[value(name = "toy")]
    Toy,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::S => Preset::S,
            PresetArg::M => Preset::M,
            PresetArg::L => Preset::L,
            PresetArg::Toy => Preset::Toy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QuantArg {
    Hqq,
    Uniform,
    None,
}

impl QuantArg {
    pub fn method(self) -> Option<QuantMethod> {
        match self {
            QuantArg::Hqq => Some(QuantMethod::Hqq),
            QuantArg::Uniform => Some(QuantMethod::Uniform),
            QuantArg::None => None,
        }
    }
}

/// Options shared by `encode` and `bench`.
#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Model and schedule preset
    #[arg(long, value_enum, default_value = "M")]
    pub preset: PresetArg,
    /// Frames per decoder group (N_g); anchors follow unless --anchors is given
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Anchor frames for encoder training (N_s)
    #[arg(long)]
    pub anchors: Option<usize>,
    /// Coordinates per step: a count, a fraction such as 1/64 or 0.01, or "full"
    #[arg(long, value_parser = parse_samples)]
    pub samples: Option<Sampling>,
    #[arg(long)]
    pub iters_stage1: Option<usize>,
    #[arg(long)]
    pub iters_stage2: Option<usize>,
    /// Learning rate for both stages
    #[arg(long)]
    pub lr: Option<f32>,
    /// Patch side p; each coordinate predicts a p×p block
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long, value_enum, default_value = "hqq")]
    pub quant: QuantArg,
    /// Parallel stage-2 workers
    #[arg(long, env = "SIEDD_WORKERS", default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Log training progress every this many iterations (0 disables)
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Directory of numbered 8-bit RGB PNG frames
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Input filename pattern
    #[arg(long, default_value = siedd::video::DEFAULT_PATTERN)]
    pub pattern: String,
    /// Inclusive source frame range, e.g. 0..44
    #[arg(long, value_parser = parse_range)]
    pub frames: Option<RangeInclusive<usize>>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Reuse the encoder of an existing file and skip encoder training
    #[arg(long)]
    pub encoder_init: Option<PathBuf>,
    /// Also report quality before quantization
    #[arg(long)]
    pub report_prequant: bool,
    /// Write the rate-distortion report as JSON to this file
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for PNG frames
    #[arg(long)]
    pub output: PathBuf,
    /// Output size as HxW; defaults to the encoded size
    #[arg(long, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
    /// Inclusive frame range, e.g. 0..0 for the first frame
    #[arg(long, value_parser = parse_range)]
    pub frames: Option<RangeInclusive<usize>>,
    #[arg(long, env = "SIEDD_WORKERS", default_value_t = 1)]
    pub workers: usize,
    /// Coordinate chunks per forward pass
    #[arg(long)]
    pub chunks: Option<usize>,
    #[arg(long, default_value = siedd::video::DEFAULT_PATTERN)]
    pub pattern: String,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reference frames
    #[arg(long)]
    pub reference: PathBuf,
    /// Frames to score against the reference
    #[arg(long)]
    pub decoded: PathBuf,
    #[arg(long, default_value = siedd::video::DEFAULT_PATTERN)]
    pub pattern: String,
    /// Pattern of the decoded frames, if it differs
    #[arg(long)]
    pub decoded_pattern: Option<String>,
    /// Bitstream whose size gives the bpp
    #[arg(long)]
    pub bitstream: Option<PathBuf>,
    /// Print JSON instead of text
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    pub file: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of PNG frames; a synthetic clip is used when omitted
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = siedd::video::DEFAULT_PATTERN)]
    pub pattern: String,
    /// Synthetic clip as HxWxN
    #[arg(long, default_value = "96x96x16", value_parser = parse_clip)]
    pub synth: (usize, usize, usize),
    /// Sweep to run: sampling, stage1-iters, group-size, bits or all
    #[arg(long, default_value = "all")]
    pub sweep: String,
    /// Comma-separated sweep values overriding the defaults
    #[arg(long, value_delimiter = ',', value_parser = parse_value)]
    pub values: Vec<f64>,
    /// Directory receiving one JSON file per sweep point
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

pub fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a..b, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad range start in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad range end in {s:?}"))?;
    if a > b {
        return Err(format!("range {s:?} is empty"));
    }
    Ok(a..=b)
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("resolution {s:?} must be positive"));
    }
    Ok((h, w))
}

fn parse_clip(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    match parts.as_slice() {
        [h, w, n] => {
            let v: Vec<usize> = [h, w, n]
                .iter()
                .map(|p| p.parse::<usize>().ok().filter(|&v| v > 0))
                .collect::<Option<_>>()
                .ok_or_else(|| format!("bad clip size {s:?}"))?;
            Ok((v[0], v[1], v[2]))
        }
        _ => Err(format!("expected HxWxN, got {s:?}")),
    }
}

/// A real number or a fraction `a/b`.
pub fn parse_value(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad number {s:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad number {s:?}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|_| format!("bad number {s:?}"))?,
    };
    if !v.is_finite() || v <= 0.0 {
        return Err(format!("{s:?} must be positive"));
    }
    Ok(v)
}

pub fn parse_samples(s: &str) -> Result<Sampling, String> {
    if s.eq_ignore_ascii_case("full") {
        return Ok(Sampling::Full);
    }
    if !s.contains(['/', '.']) {
        let c: usize = s.parse().map_err(|_| format!("bad sample count {s:?}"))?;
        if c == 0 {
            return Err("sample count must be positive".into());
        }
        return Ok(Sampling::Count(c));
    }
    let r = parse_value(s)?;
    if r > 1.0 {
        return Err(format!("sampling fraction {s:?} exceeds 1"));
    }
    Ok(Sampling::Rate(r))
}
