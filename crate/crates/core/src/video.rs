//! Frame ingestion from numbered 8-bit RGB PNGs, frame emission, and the
//! synthetic test videos.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageReader, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::error::{Error, Result};

pub const DEFAULT_PATTERN: &str = "%05d.png";
pub const DEFAULT_FPS: f32 = 30.0;

/// One RGB image, row-major `H × W × 3`, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "{} values cannot fill a {height}x{width} RGB frame",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Values clamped into `[0, 1]`.
    pub fn clamped(&self) -> Frame {
        Frame {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// 8-bit image using round-half-up of the clamped values.
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self.data.iter().map(|&v| quantize_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

/// `round(v·255)` with halves rounded up, after clamping to `[0, 1]`.
#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// An ordered frame sequence sharing one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrames {
    pub frames: Vec<Frame>,
    pub fps: f32,
    pub sources: Vec<PathBuf>,
}

impl VideoFrames {
    pub fn new(frames: Vec<Frame>, fps: f32) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::config("a video needs at least one frame"));
        };
        let (h, w) = (first.height(), first.width());
        if let Some(bad) = frames.iter().position(|f| (f.height(), f.width()) != (h, w)) {
            return Err(Error::shape(format!(
                "frame {bad} is {}x{}, frame 0 is {h}x{w}",
                frames[bad].height(),
                frames[bad].width()
            )));
        }
        Ok(Self {
            frames,
            fps,
            sources: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }
}

/// A printf-style numbered filename pattern such as `%05d.png` or `frame_%d.png`.
#[derive(Clone, Debug)]
pub struct FramePattern {
    prefix: String,
    suffix: String,
    width: usize,
    matcher: Regex,
}

impl FramePattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let spec = Regex::new(r"%(0?)(\d*)d").expect("static regex");
        let mut found = spec.find_iter(pattern);
        let (Some(m), None) = (found.next(), found.next()) else {
            return Err(Error::config(format!(
                "filename pattern {pattern:?} must contain exactly one %d-style field"
            )));
        };
        let caps = spec.captures(m.as_str()).expect("matched above");
        let width = if caps[1].is_empty() {
            0
        } else {
            caps[2].parse().unwrap_or(0)
        };
        let prefix = pattern[..m.start()].to_string();
        let suffix = pattern[m.end()..].to_string();
        let matcher = Regex::new(&format!(
            "^{}(\\d+){}$",
            regex::escape(&prefix),
            regex::escape(&suffix)
        ))
        .map_err(|e| Error::config(format!("bad filename pattern {pattern:?}: {e}")))?;
        Ok(Self {
            prefix,
            suffix,
            width,
            matcher,
        })
    }

    pub fn format(&self, index: usize) -> String {
        format!("{}{:0width$}{}", self.prefix, index, self.suffix, width = self.width)
    }

    pub fn index_of(&self, file_name: &str) -> Option<usize> {
        self.matcher
            .captures(file_name)
            .and_then(|c| c[1].parse().ok())
    }
}

/// Loads numbered PNG frames from `dir`, optionally restricted to an
/// inclusive index range. Indices must be contiguous.
pub fn load_frames(dir: &Path, pattern: &str, range: Option<(usize, usize)>) -> Result<VideoFrames> {
    let pat = FramePattern::parse(pattern)?;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indexed = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(idx) = name.to_str().and_then(|n| pat.index_of(n)) else {
            continue;
        };
        if range.is_some_and(|(a, b)| idx < a || idx > b) {
            continue;
        }
        indexed.push((idx, entry.path()));
    }
    indexed.sort();
    if indexed.is_empty() {
        return Err(Error::Ingest {
            path: dir.to_path_buf(),
            msg: format!("no files match {pattern:?}"),
        });
    }
    let expected_start = range.map_or(indexed[0].0, |(a, _)| a);
    for (k, (idx, path)) in indexed.iter().enumerate() {
        let want = expected_start + k;
        if *idx != want {
            return Err(Error::Ingest {
                path: path.clone(),
                msg: format!("frame index {want} is missing (next file has index {idx})"),
            });
        }
    }
    if let Some((_, b)) = range {
        let last = indexed.last().expect("non-empty").0;
        if last < b {
            return Err(Error::Ingest {
                path: dir.join(pat.format(last + 1)),
                msg: format!("frame index {} is missing", last + 1),
            });
        }
    }

    let mut frames = Vec::with_capacity(indexed.len());
    let mut first_dims: Option<(u32, u32, PathBuf)> = None;
    for (_, path) in &indexed {
        let img = read_rgb8(path)?;
        match &first_dims {
            None => first_dims = Some((img.width(), img.height(), path.clone())),
            Some((w, h, first)) if (*w, *h) != (img.width(), img.height()) => {
                return Err(Error::Ingest {
                    path: path.clone(),
                    msg: format!(
                        "size {}x{} differs from {}x{} of {}",
                        img.width(),
                        img.height(),
                        w,
                        h,
                        first.display()
                    ),
                });
            }
            Some(_) => {}
        }
        frames.push(Frame::from_rgb8(&img));
    }
    let mut video = VideoFrames::new(frames, DEFAULT_FPS)?;
    video.sources = indexed.into_iter().map(|(_, p)| p).collect();
    Ok(video)
}

fn read_rgb8(path: &Path) -> Result<RgbImage> {
    let ingest = |msg: String| Error::Ingest {
        path: path.to_path_buf(),
        msg,
    };
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| ingest(e.to_string()))?;
    match img.color() {
        ColorType::Rgb8 => Ok(img.into_rgb8()),
        other => Err(ingest(format!("expected 8-bit RGB, found {other:?}"))),
    }
}

/// Writes frames as PNGs named by `pattern`, numbering from `first_index`.
pub fn write_frames(
    frames: &[Frame],
    dir: &Path,
    pattern: &str,
    first_index: usize,
) -> Result<Vec<PathBuf>> {
    let pat = FramePattern::parse(pattern)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let path = dir.join(pat.format(first_index + k));
        frame
            .to_rgb8()
            .save(&path)
            .map_err(|e| Error::Ingest {
                path: path.clone(),
                msg: e.to_string(),
            })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Analytic test videos.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SynthKind {
    /// Every pixel of every frame has this color.
    Constant([f32; 3]),
    /// Smooth per-channel sinusoidal ramps drifting over time.
    MovingGradient,
    /// Two-tone checkerboard with the given period in pixels (even), panning
    /// one pixel right per frame.
    CheckerPan { period: usize },
    /// Independent uniform `[0, 1)` values.
    Noise,
}

/// Deterministic synthetic video.
///
/// Moving gradient, with `u = (x + ½)/W`, `v = (y + ½)/H`, `s = t/N` and
/// seed-derived phases `φ₀..φ₂ ∈ [0, 2π)`:
///
/// ```text
/// R = 0.5 + 0.35·sin(2π(2u + s) + φ₀)
/// G = 0.5 + 0.35·sin(2π(1.5v − s) + φ₁)
/// B = 0.5 + 0.35·sin(2π(u + v + 0.5s) + φ₂)
/// ```
///
/// Checker pan: pixel `(x, y)` of frame `t` is light (0.8) when
/// `⌊(x + t)/(P/2)⌋ + ⌊y/(P/2)⌋` is even and dark (0.2) otherwise.
pub fn synth_video(kind: SynthKind, height: usize, width: usize, n: usize, seed: u64) -> Result<VideoFrames> {
    if height == 0 || width == 0 || n == 0 {
        return Err(Error::config("synthetic video dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = match kind {
        SynthKind::Constant(rgb) => (0..n).map(|_| Frame::filled(height, width, rgb)).collect(),
        SynthKind::MovingGradient => {
            let tau = std::f64::consts::TAU;
            let phase: [f64; 3] = [rng.gen::<f64>() * tau, rng.gen::<f64>() * tau, rng.gen::<f64>() * tau];
            (0..n)
                .map(|t| {
                    let s = t as f64 / n as f64;
                    let mut data = Vec::with_capacity(height * width * 3);
                    for y in 0..height {
                        let v = (y as f64 + 0.5) / height as f64;
                        for x in 0..width {
                            let u = (x as f64 + 0.5) / width as f64;
                            data.push((0.5 + 0.35 * (tau * (2.0 * u + s) + phase[0]).sin()) as f32);
                            data.push((0.5 + 0.35 * (tau * (1.5 * v - s) + phase[1]).sin()) as f32);
                            data.push((0.5 + 0.35 * (tau * (u + v + 0.5 * s) + phase[2]).sin()) as f32);
                        }
                    }
                    Frame::new(height, width, data).expect("sized above")
                })
                .collect()
        }
        SynthKind::CheckerPan { period } => {
            if period < 2 || period % 2 != 0 {
                return Err(Error::config(format!("checker period must be even and ≥ 2, got {period}")));
            }
            let half = period / 2;
            (0..n)
                .map(|t| {
                    let mut data = Vec::with_capacity(height * width * 3);
                    for y in 0..height {
                        for x in 0..width {
                            let light = ((x + t) / half + y / half) % 2 == 0;
                            let v = if light { 0.8 } else { 0.2 };
                            data.extend_from_slice(&[v, v, v]);
                        }
                    }
                    Frame::new(height, width, data).expect("sized above")
                })
                .collect()
        }
        SynthKind::Noise => (0..n)
            .map(|_| {
                let data = (0..height * width * 3).map(|_| rng.gen::<f32>()).collect();
                Frame::new(height, width, data).expect("sized above")
            })
            .collect(),
    };
    VideoFrames::new(frames, DEFAULT_FPS)
}
