//! Ablation sweeps over sampling rate, stage-1 iterations, group size and
//! quantization bits. Each point is a full encode measured post-quantization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_frames, encode_video, pack, DecodeOptions, EncodeOptions};
use crate::error::{Error, Result};
use crate::metrics::RdReport;
use crate::quant::QuantConfig;
use crate::trainer::Sampling;
use crate::video::VideoFrames;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    Sampling,
    Stage1Iters,
    GroupSize,
    Bits,
}

impl Sweep {
    pub const ALL: [Sweep; 4] = [Sweep::Sampling, Sweep::Stage1Iters, Sweep::GroupSize, Sweep::Bits];

    /// Default sweep values; sampling rates are fractions of the grid.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            Sweep::Sampling => [128.0, 256.0, 512.0, 1024.0, 2048.0].iter().map(|d| 1.0 / d).collect(),
            Sweep::Stage1Iters => vec![500.0, 2000.0, 5000.0],
            Sweep::GroupSize => vec![10.0, 20.0, 30.0],
            Sweep::Bits => vec![4.0, 5.0, 6.0, 7.0, 8.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sweep::Sampling => "sampling",
            Sweep::Stage1Iters => "stage1-iters",
            Sweep::GroupSize => "group-size",
            Sweep::Bits => "bits",
        }
    }

    fn column(self) -> &'static str {
        match self {
            Sweep::Sampling => "Sampling Rate",
            Sweep::Stage1Iters => "Encoder Iters",
            Sweep::GroupSize => "Group Size",
            Sweep::Bits => "Bits",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Sweep::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sweep {s:?} (expected sampling, stage1-iters, group-size or bits)")))
    }
}

/// One measured sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub sweep: Sweep,
    pub value: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub bpp: f64,
    pub file_bytes: u64,
    /// Training and packing time; for the bits sweep, the shared training run.
    pub encode_seconds: f64,
}

impl BenchPoint {
    fn new(sweep: Sweep, value: f64, report: &RdReport, seconds: f64) -> Self {
        Self {
            sweep,
            value,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
            bpp: report.bpp.unwrap_or(f64::NAN),
            file_bytes: report.file_bytes.unwrap_or(0),
            encode_seconds: seconds,
        }
    }

    pub fn label(&self) -> String {
        match self.sweep {
            Sweep::Sampling if self.value > 0.0 && self.value < 1.0 => format!("1/{}", (1.0 / self.value).round()),
            _ => format!("{}", self.value),
        }
    }
}

fn as_count(sweep: Sweep, v: f64) -> Result<usize> {
    if v < 1.0 || v.fract() != 0.0 {
        return Err(Error::config(format!("{sweep} value {v} must be a positive integer")));
    }
    Ok(v as usize)
}

/// Runs one sweep, calling `each` as soon as a point is measured.
pub fn run_sweep(
    video: &VideoFrames,
    base: &EncodeOptions,
    sweep: Sweep,
    values: &[f64],
    mut each: impl FnMut(&BenchPoint) -> Result<()>,
) -> Result<Vec<BenchPoint>> {
    let mut points = Vec::with_capacity(values.len());
    if sweep == Sweep::Bits {
        // quantization does not affect training: train once, pack per width
        let bits: Vec<u8> = values
            .iter()
            .map(|&v| as_count(sweep, v).map(|b| b.min(255) as u8))
            .collect::<Result<_>>()?;
        let base_quant = base.quant.unwrap_or_default();
        for &b in &bits {
            QuantConfig { bits: b, ..base_quant }.validate()?;
        }
        let mut opts = base.clone();
        opts.quant = None;
        let trained = encode_video(video, &opts)?;
        for (&v, &b) in values.iter().zip(&bits) {
            let q = QuantConfig { bits: b, ..base_quant };
            let packed = pack(&trained.trained, Some(&q), trained.digest.clone())?;
            let decoded = decode_frames(&packed.model, &DecodeOptions::default())?;
            let report = RdReport::compare(&video.frames, &decoded.clamped())?.with_rate(
                packed.bytes.len() as u64,
                video.len(),
                video.height(),
                video.width(),
            );
            let p = BenchPoint::new(sweep, v, &report, trained.seconds);
            each(&p)?;
            points.push(p);
        }
        return Ok(points);
    }
    for &v in values {
        let mut opts = base.clone();
        match sweep {
            Sweep::Sampling => {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::config(format!("sampling rate {v} must lie in (0, 1]")));
                }
                opts.train.sampling = Sampling::Rate(v);
            }
            Sweep::Stage1Iters => opts.train.stage1_iters = as_count(sweep, v)?,
            Sweep::GroupSize => {
                opts.train.group_size = as_count(sweep, v)?;
                opts.train.anchors = None;
            }
            Sweep::Bits => unreachable!("handled above"),
        }
        let out = encode_video(video, &opts)?;
        let p = BenchPoint::new(sweep, v, &out.report, out.seconds);
        each(&p)?;
        points.push(p);
    }
    Ok(points)
}

/// A plain-text table with one row per point.
pub fn format_table(points: &[BenchPoint]) -> String {
    let Some(first) = points.first() else {
        return String::new();
    };
    let mut s = format!(
        "{:<14} {:>10} {:>8} {:>10} {:>10}\n",
        first.sweep.column(),
        "PSNR (dB)",
        "SSIM",
        "bpp",
        "Time (s)"
    );
    for p in points {
        s.push_str(&format!(
            "{:<14} {:>10.2} {:>8.4} {:>10.4} {:>10.2}\n",
            p.label(),
            p.psnr,
            p.ssim,
            p.bpp,
            p.encode_seconds
        ));
    }
    s
}
