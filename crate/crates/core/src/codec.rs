//! End-to-end encode and decode.
//!
//! Encode: anchors → stage 1 → per-group stage 2 → quantize → serialize.
//! Decode: deserialize → coordinate grid at any patch-aligned resolution →
//! chunked forward passes group by group → frames.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::bitstream::{self, SectionSizes, SieddBitstream, TrainDigest};
use crate::coords::CoordGrid;
use crate::error::{Error, Result};
use crate::metrics::{bpp, RdReport};
use crate::model::{assemble_frames, build_model, ModelConfig, SharedEncoder, SieddModel, VideoMeta};
use crate::quant::{apply_quantization, quantize_model, QuantConfig};
use crate::tensor::Tensor2D;
use crate::trainer::{run_pool, select_anchors, train_groups_with, train_stage1, GroupInit, LossTrace, TrainConfig};
use crate::video::{load_frames, write_frames, Frame, VideoFrames};

/// Decoding splits the coordinate grid into this many forward passes.
pub const DEFAULT_DECODE_CHUNKS: usize = 8;
/// Chunk count for outputs above [`LARGE_FRAME_PIXELS`].
pub const LARGE_DECODE_CHUNKS: usize = 32;
pub const LARGE_FRAME_PIXELS: usize = 8_000_000;

/// Latent caches above this many floats are recomputed per group instead.
const DECODE_LATENT_LIMIT: usize = 1 << 27;

#[derive(Clone, Debug)]
pub struct EncodeOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `None` stores decoder trunks in full precision.
    pub quant: Option<QuantConfig>,
    /// Reuse this encoder and skip stage 1; decoders start from fresh weights.
    pub encoder_init: Option<SharedEncoder>,
    /// Also measure quality before quantization.
    pub report_prequant: bool,
}

impl EncodeOptions {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            model,
            train,
            quant: Some(QuantConfig::default()),
            encoder_init: None,
            report_prequant: false,
        }
    }
}

/// Everything an encode produces besides the file itself.
#[derive(Clone, Debug)]
pub struct EncodeOutcome {
    /// Quality of the shipped (quantized) artifact.
    pub report: RdReport,
    pub prequant_report: Option<RdReport>,
    pub bytes: Vec<u8>,
    pub sizes: SectionSizes,
    /// Model as the decoder will reconstruct it.
    pub model: SieddModel,
    /// Trained model before quantization.
    pub trained: SieddModel,
    pub digest: TrainDigest,
    pub stage1_trace: LossTrace,
    pub stage2_traces: Vec<LossTrace>,
    pub encoder_checksum_before_stage2: u64,
    pub encoder_checksum_after_stage2: u64,
    pub seconds: f64,
}

/// Encodes frames already in memory.
pub fn encode_video(video: &VideoFrames, opts: &EncodeOptions) -> Result<EncodeOutcome> {
    let start = Instant::now();
    let cfg = &opts.train;
    cfg.validate()?;
    let n = video.len();
    if n == 0 {
        return Err(Error::config("cannot encode an empty video"));
    }
    let meta = VideoMeta {
        height: video.height(),
        width: video.width(),
        frames: n,
        fps: video.fps,
    };
    let grid = CoordGrid::new(meta.height, meta.width, opts.model.patch)?;
    let batch = cfg.sampling.batch_size(&grid);

    let (mut model, stage1_trace, n_s, init) = match &opts.encoder_init {
        None => {
            let n_s = cfg.anchor_count(n)?;
            let anchors = select_anchors(n, n_s)?;
            let mut model = build_model(&opts.model, meta, &anchors, cfg.seed)?;
            let trace = train_stage1(&mut model, video, cfg).map_err(|e| e.in_stage("stage-1"))?;
            (model, trace, n_s, GroupInit::Anchor)
        }
        Some(enc) => {
            opts.model.validate()?;
            let expect = opts.model.encoder_dims();
            let got: Vec<usize> = std::iter::once(enc.mlp.in_dim())
                .chain(enc.mlp.layers().iter().map(|l| l.out_dim()))
                .collect();
            if got != expect {
                return Err(Error::config(format!(
                    "initial encoder has widths {got:?}, configuration needs {expect:?}"
                )));
            }
            let model = SieddModel {
                config: opts.model.clone(),
                meta,
                encoder: enc.clone(),
                groups: Vec::new(),
            };
            (model, Vec::new(), 0, GroupInit::Random)
        }
    };

    let before = model.encoder.checksum();
    let stage2_traces = train_groups_with(&mut model, video, cfg, init).map_err(|e| e.in_stage("stage-2"))?;
    let after = model.encoder.checksum();

    let prequant_report = if opts.report_prequant {
        let decoded = decode_frames(&model, &DecodeOptions::default())?;
        Some(RdReport::compare(&video.frames, &decoded.clamped())?)
    } else {
        None
    };

    let digest = TrainDigest::new(cfg, n_s, batch);
    let packed = pack(&model, opts.quant.as_ref(), digest.clone())?;
    let (bytes, sizes, shipped) = (packed.bytes, packed.sizes, packed.model);
    let seconds = start.elapsed().as_secs_f64();

    let decoded = decode_frames(&shipped, &DecodeOptions::default())?;
    let mut report = RdReport::compare(&video.frames, &decoded.clamped())?.with_rate(bytes.len() as u64, n, meta.height, meta.width);
    report.encode_seconds = Some(seconds);
    report.decode_fps = Some(decoded.fps);

    Ok(EncodeOutcome {
        report,
        prequant_report,
        bytes,
        sizes,
        model: shipped,
        trained: model,
        digest,
        stage1_trace,
        stage2_traces,
        encoder_checksum_before_stage2: before,
        encoder_checksum_after_stage2: after,
        seconds,
    })
}

/// A serialized model together with the model its decoder will rebuild.
#[derive(Clone, Debug)]
pub struct Packed {
    pub bytes: Vec<u8>,
    pub sizes: SectionSizes,
    pub model: SieddModel,
}

/// Quantizes a trained model and serializes it.
pub fn pack(model: &SieddModel, quant: Option<&QuantConfig>, digest: TrainDigest) -> Result<Packed> {
    let quantized = quantize_model(model, quant).map_err(|e| e.in_stage("quantize"))?;
    let stream = SieddBitstream::new(model, quantized, digest);
    let (bytes, sizes) = bitstream::serialize_with_sizes(&stream).map_err(|e| e.in_stage("serialize"))?;
    let model = apply_quantization(model, &stream.quantized)?;
    Ok(Packed { bytes, sizes, model })
}

/// Loads PNG frames, encodes them, and writes `out_file`. Nothing is left
/// at `out_file` if any step fails.
pub fn encode(
    frames_dir: &Path,
    pattern: &str,
    range: Option<(usize, usize)>,
    opts: &EncodeOptions,
    out_file: &Path,
) -> Result<EncodeOutcome> {
    let video = load_frames(frames_dir, pattern, range).map_err(|e| e.in_stage("ingest"))?;
    let outcome = encode_video(&video, opts)?;
    let write = std::fs::write(out_file, &outcome.bytes);
    if let Err(e) = write {
        let _ = std::fs::remove_file(out_file);
        return Err(Error::io(out_file, e).in_stage("write"));
    }
    Ok(outcome)
}

#[derive(Clone, Debug, Default)]
pub struct DecodeOptions {
    /// Output `(height, width)`; defaults to the encoded size.
    pub resolution: Option<(usize, usize)>,
    /// Inclusive frame range, clamped to the video.
    pub frames: Option<RangeInclusive<usize>>,
    /// Coordinate chunks per forward pass; defaults by output size.
    pub chunks: Option<usize>,
    /// Groups decoded concurrently.
    pub workers: usize,
}

/// Decoded frames (raw network output, unclamped) with timing.
#[derive(Clone, Debug)]
pub struct DecodedVideo {
    pub first_frame: usize,
    pub frames: Vec<Frame>,
    /// Frames per second of forward computation.
    pub fps: f64,
    pub seconds: f64,
}

impl DecodedVideo {
    /// Frames as they are written to disk: every value clamped to `[0, 1]`.
    pub fn clamped(&self) -> Vec<Frame> {
        self.frames.iter().map(Frame::clamped).collect()
    }
}

/// Checks `(h, w)` against the patch size; the error names the nearest valid sizes.
pub fn check_resolution(h: usize, w: usize, patch: usize) -> Result<()> {
    let nearest = |v: usize| -> String {
        let lo = v / patch * patch;
        let hi = lo + patch;
        if lo == 0 {
            format!("{hi}")
        } else {
            format!("{lo} or {hi}")
        }
    };
    if h == 0 || w == 0 {
        return Err(Error::config(format!("resolution {h}x{w} must be positive")));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "resolution {h}x{w} is not divisible by the patch size {patch}; nearest valid heights: {}, widths: {}",
            nearest(h),
            nearest(w)
        )));
    }
    Ok(())
}

/// Evaluates the model on a grid and assembles frames.
pub fn decode_frames(model: &SieddModel, opts: &DecodeOptions) -> Result<DecodedVideo> {
    let (h, w) = opts.resolution.unwrap_or((model.meta.height, model.meta.width));
    let p = model.config.patch;
    check_resolution(h, w, p)?;
    let grid = CoordGrid::new(h, w, p)?;
    let n = model.frame_count();
    if n == 0 {
        return Err(Error::State("model has no decoder groups".into()));
    }
    let (lo, hi) = match &opts.frames {
        Some(r) => {
            let lo = (*r.start()).min(n - 1);
            let hi = (*r.end()).min(n - 1);
            if lo > hi {
                return Err(Error::config(format!("empty frame range {r:?}")));
            }
            (lo, hi)
        }
        None => (0, n - 1),
    };
    let chunks = opts
        .chunks
        .unwrap_or(if h * w > LARGE_FRAME_PIXELS { LARGE_DECODE_CHUNKS } else { DEFAULT_DECODE_CHUNKS })
        .clamp(1, grid.len());
    let bounds: Vec<(usize, usize)> = (0..chunks)
        .map(|k| (k * grid.len() / chunks, (k + 1) * grid.len() / chunks))
        .filter(|(a, b)| a < b)
        .collect();

    let start = Instant::now();
    let features = |a: usize, b: usize| model.config.pos_encoding.encode(&grid.coords().slice_rows(a, b));
    let cache: Option<Vec<Tensor2D>> = if grid.len() * model.config.dim <= DECODE_LATENT_LIMIT {
        Some(
            bounds
                .iter()
                .map(|&(a, b)| model.encoder.forward(&features(a, b)?))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let wanted: Vec<usize> = (0..model.groups.len())
        .filter(|&g| {
            let f = &model.groups[g].frames;
            f.first().is_some_and(|&a| a <= hi) && f.last().is_some_and(|&b| b >= lo)
        })
        .collect();
    let per_group = run_pool(wanted, opts.workers.max(1), |_, g| {
        let group = &model.groups[g];
        let width = group.n_heads() * model.config.out_channels();
        let mut preds = Tensor2D::zeros(grid.len(), width);
        for (k, &(a, b)) in bounds.iter().enumerate() {
            let latent = match &cache {
                Some(c) => group.forward(&c[k])?,
                None => group.forward(&model.encoder.forward(&features(a, b)?)?)?,
            };
            preds.data_mut()[a * width..b * width].copy_from_slice(latent.data());
        }
        let first = group.frames[0];
        let heads = lo.max(first) - first..hi.min(first + group.n_heads() - 1) - first + 1;
        assemble_frames(&preds, &grid, heads)
    })?;
    let seconds = start.elapsed().as_secs_f64();
    let frames: Vec<Frame> = per_group.into_iter().flatten().collect();
    Ok(DecodedVideo {
        first_frame: lo,
        fps: frames.len() as f64 / seconds.max(1e-9),
        frames,
        seconds,
    })
}

/// Decodes a file into numbered PNGs in `out_dir`, named by source frame index.
pub fn decode(file: &Path, out_dir: &Path, pattern: &str, opts: &DecodeOptions) -> Result<(DecodedVideo, Vec<PathBuf>)> {
    let (stream, _) = bitstream::read_file(file)?;
    let model = stream.to_model()?;
    let decoded = decode_frames(&model, opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths = write_frames(&decoded.clamped(), out_dir, pattern, decoded.first_frame)?;
    Ok((decoded, paths))
}

/// Human-readable summary of a file's header and layout.
#[derive(Clone, Debug, Serialize)]
pub struct FileInfo {
    pub version: u16,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: f32,
    pub patch: usize,
    pub dim: usize,
    pub enc_hidden_layers: usize,
    pub dec_hidden_layers: usize,
    pub omega: f32,
    pub n_freqs: usize,
    pub include_input: bool,
    pub groups: usize,
    pub train: TrainDigest,
    pub quant: Option<QuantConfig>,
    pub sizes: SectionSizes,
    pub bpp: f64,
}

impl std::fmt::Display for FileInfo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "version: {}", self.version)?;
        writeln!(f, "frames: {}  size: {}x{}  fps: {}", self.frames, self.height, self.width, self.fps)?;
        writeln!(
            f,
            "model: dim {}  encoder hidden {}  decoder hidden {}  omega {}  patch {}  frequencies {}{}",
            self.dim,
            self.enc_hidden_layers,
            self.dec_hidden_layers,
            self.omega,
            self.patch,
            self.n_freqs,
            if self.include_input { " +input" } else { "" }
        )?;
        let t = &self.train;
        writeln!(
            f,
            "training: group size {}  anchors {}  batch {}  iterations {}/{}  lr {}/{}  seed {}",
            t.group_size, t.anchors, t.batch_size, t.stage1_iters, t.stage2_iters, t.lr_stage1, t.lr_stage2, t.seed
        )?;
        match &self.quant {
            Some(q) => writeln!(f, "quantization: {:?} {} bits, group {}", q.method, q.bits, q.group_size)?,
            None => writeln!(f, "quantization: none")?,
        }
        let s = &self.sizes;
        writeln!(
            f,
            "payload bytes: header {}  encoder {}  groups {} ({} groups)  total {}",
            s.header,
            s.encoder,
            s.groups.iter().sum::<usize>(),
            self.groups,
            s.payload
        )?;
        writeln!(f, "file bytes: {}", s.file)?;
        write!(f, "bpp: {:.6}", self.bpp)
    }
}

pub fn info(file: &Path) -> Result<FileInfo> {
    let (b, sizes) = bitstream::read_file(file)?;
    let c = &b.config;
    Ok(FileInfo {
        version: bitstream::VERSION,
        height: b.meta.height,
        width: b.meta.width,
        frames: b.meta.frames,
        fps: b.meta.fps,
        patch: c.patch,
        dim: c.dim,
        enc_hidden_layers: c.enc_hidden_layers,
        dec_hidden_layers: c.dec_hidden_layers,
        omega: c.omega,
        n_freqs: c.pos_encoding.n_freqs(),
        include_input: c.pos_encoding.include_input(),
        groups: b.quantized.groups.len(),
        train: b.train.clone(),
        quant: b.quantized.quant,
        bpp: bpp(sizes.file as u64 * 8, b.meta.frames, b.meta.height, b.meta.width),
        sizes,
    })
}

/// Shared encoder of an existing file, for `--encoder-init`.
pub fn load_encoder(file: &Path) -> Result<(SharedEncoder, ModelConfig)> {
    let (b, _) = bitstream::read_file(file)?;
    Ok((SharedEncoder { mlp: b.encoder }, b.config))
}
