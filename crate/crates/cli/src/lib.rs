//! The `siedd` command-line tool: encode, decode, metrics, info and bench.

pub mod args;

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use siedd::bench::{format_table, run_sweep, Sweep};
use siedd::codec::{self, DecodeOptions, EncodeOptions};
use siedd::metrics::RdReport;
use siedd::model::{ModelConfig, Preset};
use siedd::quant::QuantConfig;
use siedd::trainer::TrainConfig;
use siedd::video::{load_frames, synth_video, SynthKind};

use args::{BenchArgs, Cli, Command, DecodeArgs, EncodeArgs, InfoArgs, MetricsArgs, TrainArgs};

/// Exit code for runtime failures.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit code for invalid invocations.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(siedd::Error),
}

impl std::error::Error for CliError {}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<siedd::Error> for CliError {
    fn from(e: siedd::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(siedd::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Encode options for the given flags, starting from the preset.
pub fn encode_options(t: &TrainArgs) -> Result<EncodeOptions, CliError> {
    let preset = Preset::from(t.preset);
    let mut model = ModelConfig::preset(preset);
    if let Some(p) = t.patch {
        model.patch = p;
    }
    let mut train = match preset {
        Preset::Toy => TrainConfig::toy(),
        _ => TrainConfig::default(),
    };
    if let Some(g) = t.group_size {
        train.group_size = g;
    }
    train.anchors = t.anchors;
    if let Some(s) = t.samples {
        train.sampling = s;
    }
    if let Some(n) = t.iters_stage1 {
        train.stage1_iters = n;
    }
    if let Some(n) = t.iters_stage2 {
        train.stage2_iters = n;
    }
    if let Some(lr) = t.lr {
        train.stage1_opt.lr = lr;
        train.stage2_opt.lr = lr;
    }
    if let Some(n) = t.log_every {
        train.log_every = n;
    }
    train.workers = t.workers.max(1);
    train.seed = t.seed;
    let quant = match t.quant.method() {
        Some(method) => Some(QuantConfig {
            method,
            ..QuantConfig::with_bits(t.bits.unwrap_or(QuantConfig::default().bits))
        }),
        None => {
            if t.bits.is_some() {
                warn!("--bits is ignored with --quant none");
            }
            None
        }
    };
    let usage = |e: siedd::Error| CliError::Usage(e.to_string());
    model.validate().map_err(usage)?;
    train.validate().map_err(usage)?;
    if let Some(q) = &quant {
        q.validate().map_err(usage)?;
    }
    let mut opts = EncodeOptions::new(model, train);
    opts.quant = quant;
    Ok(opts)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Info(a) => cmd_info(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn cmd_encode(a: EncodeArgs) -> Result<(), CliError> {
    let mut opts = encode_options(&a.train)?;
    opts.report_prequant = a.report_prequant;
    if let Some(path) = &a.encoder_init {
        let (encoder, mut cfg) = codec::load_encoder(path)?;
        cfg.patch = opts.model.patch;
        info!("reusing the encoder of {}", path.display());
        opts.model = cfg;
        opts.encoder_init = Some(encoder);
    }
    let range = a.frames.map(|r| (*r.start(), *r.end()));
    let out = codec::encode(&a.input, &a.pattern, range, &opts, &a.output)?;
    info!(
        "encoder checksum {:016x} before stage 2, {:016x} after",
        out.encoder_checksum_before_stage2, out.encoder_checksum_after_stage2
    );
    let mut stdout = std::io::stdout().lock();
    let _ = write!(stdout, "{}", out.report.to_text());
    if let Some(pre) = &out.prequant_report {
        let _ = writeln!(stdout, "prequant mean_psnr={:.4} mean_ssim={:.6}", pre.mean_psnr, pre.mean_ssim);
    }
    if let Some(path) = &a.report {
        let doc = serde_json::json!({
            "report": out.report,
            "prequant": out.prequant_report,
        });
        let text = serde_json::to_string_pretty(&doc).expect("report is serializable");
        fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<(), CliError> {
    let opts = DecodeOptions {
        resolution: a.resolution,
        frames: a.frames,
        chunks: a.chunks,
        workers: a.workers.max(1),
    };
    if opts.chunks == Some(0) {
        return Err(CliError::Usage("--chunks must be positive".into()));
    }
    let (decoded, paths) = codec::decode(&a.input, &a.output, &a.pattern, &opts)?;
    let (h, w) = decoded
        .frames
        .first()
        .map(|f| (f.height(), f.width()))
        .unwrap_or((0, 0));
    println!(
        "frames={} first={} size={h}x{w} decode_seconds={:.3} decode_fps={:.3}",
        paths.len(),
        decoded.first_frame,
        decoded.seconds,
        decoded.fps
    );
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<(), CliError> {
    let reference = load_frames(&a.reference, &a.pattern, None)?;
    let decoded_pattern = a.decoded_pattern.as_deref().unwrap_or(&a.pattern);
    let decoded = load_frames(&a.decoded, decoded_pattern, None)?;
    let mut report = RdReport::compare(&reference.frames, &decoded.frames)?;
    if let Some(path) = &a.bitstream {
        let bytes = fs::metadata(path).map_err(|e| io_err(path, e))?.len();
        report = report.with_rate(bytes, reference.len(), reference.height(), reference.width());
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn cmd_info(a: InfoArgs) -> Result<(), CliError> {
    let info = codec::info(&a.file)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&info).expect("info is serializable"));
    } else {
        println!("{info}");
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let sweeps: Vec<Sweep> = if a.sweep == "all" {
        Sweep::ALL.to_vec()
    } else {
        vec![a.sweep.parse().map_err(|e: siedd::Error| CliError::Usage(e.to_string()))?]
    };
    if !a.values.is_empty() && sweeps.len() > 1 {
        return Err(CliError::Usage("--values needs a single --sweep".into()));
    }
    let opts = encode_options(&a.train)?;
    let video = match &a.input {
        Some(dir) => load_frames(dir, &a.pattern, None)?,
        None => {
            let (h, w, n) = a.synth;
            synth_video(SynthKind::MovingGradient, h, w, n, a.train.seed)?
        }
    };
    fs::create_dir_all(&a.output).map_err(|e| io_err(&a.output, e))?;
    for sweep in sweeps {
        let values = if a.values.is_empty() {
            sweep.default_values()
        } else {
            a.values.clone()
        };
        let mut k = 0;
        let points = run_sweep(&video, &opts, sweep, &values, |p| {
            let path = a.output.join(format!("{}-{k:02}.json", sweep.name()));
            k += 1;
            let text = serde_json::to_string_pretty(p).expect("point is serializable");
            fs::write(&path, text).map_err(|e| siedd::Error::Io { path, source: e })?;
            info!("{sweep} {} psnr={:.3} bpp={:.5} seconds={:.2}", p.label(), p.psnr, p.bpp, p.encode_seconds);
            Ok(())
        })?;
        println!("{}", format_table(&points));
    }
    Ok(())
}
