//! Rate–distortion metrics: PSNR, SSIM on BT.601 luma, and bits per pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::Frame;

/// PSNR reported for identical frames when aggregating.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &Frame, b: &Frame) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "frames are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared error over every channel value, in 64-bit.
pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10·log10(peak² / MSE)`; `+∞` when the frames are identical.
pub fn psnr(a: &Frame, b: &Frame, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

/// PSNR with the aggregation cap applied.
pub fn capped(psnr_db: f64) -> f64 {
    psnr_db.min(PSNR_CAP)
}

/// ITU-R BT.601 luma in 64-bit, row-major.
pub fn luma(f: &Frame) -> Vec<f64> {
    f.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let x = i as f64 - c;
        *t = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

// Separable "valid" filtering: output is (h − 10) × (w − 10).
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &img[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes over every full 11×11
/// Gaussian-weighted window (σ = 1.5), `C₁ = (0.01·peak)²`, `C₂ = (0.03·peak)²`.
pub fn ssim(a: &Frame, b: &Frame, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (luma(a), luma(b));
    let taps = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, h, w, &taps);
    let mu_y = filter_valid(&y, h, w, &taps);
    let xx = filter_valid(&prod(&x, &x), h, w, &taps);
    let yy = filter_valid(&prod(&y, &y), h, w, &taps);
    let xy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cov = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// `bits / (N·H·W)`.
pub fn bpp(file_bits: u64, frames: usize, height: usize, width: usize) -> f64 {
    file_bits as f64 / (frames as f64 * height as f64 * width as f64)
}

/// Per-frame and aggregate quality plus rate and timing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdReport {
    /// Uncapped per-frame PSNR; identical frames are `null` in JSON.
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Mean of the capped per-frame PSNR.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub bpp: Option<f64>,
    pub file_bytes: Option<u64>,
    pub encode_seconds: Option<f64>,
    pub decode_fps: Option<f64>,
}

impl RdReport {
    /// Quality of `decoded` against `reference`, frame by frame.
    pub fn compare(reference: &[Frame], decoded: &[Frame]) -> Result<Self> {
        if reference.len() != decoded.len() {
            return Err(Error::shape(format!(
                "{} reference frames vs {} decoded frames",
                reference.len(),
                decoded.len()
            )));
        }
        if reference.is_empty() {
            return Err(Error::config("no frames to compare"));
        }
        let mut r = RdReport::default();
        for (a, b) in reference.iter().zip(decoded) {
            r.psnr.push(psnr(a, b, 1.0)?);
            r.ssim.push(ssim(a, b, 1.0)?);
        }
        let n = r.psnr.len() as f64;
        r.mean_psnr = r.psnr.iter().map(|&p| capped(p)).sum::<f64>() / n;
        r.mean_ssim = r.ssim.iter().sum::<f64>() / n;
        Ok(r)
    }

    pub fn with_rate(mut self, file_bytes: u64, frames: usize, height: usize, width: usize) -> Self {
        self.file_bytes = Some(file_bytes);
        self.bpp = Some(bpp(file_bytes * 8, frames, height, width));
        self
    }

    /// One `key=value` line per frame, then a summary line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (p, q)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            s.push_str(&format!("frame={i} psnr={} ssim={q:.6}\n", fmt_psnr(*p)));
        }
        s.push_str(&format!("mean_psnr={:.4} mean_ssim={:.6}", self.mean_psnr, self.mean_ssim));
        if let Some(b) = self.bpp {
            s.push_str(&format!(" bpp={b:.6}"));
        }
        if let Some(b) = self.file_bytes {
            s.push_str(&format!(" bytes={b}"));
        }
        if let Some(t) = self.encode_seconds {
            s.push_str(&format!(" encode_seconds={t:.3}"));
        }
        if let Some(f) = self.decode_fps {
            s.push_str(&format!(" decode_fps={f:.3}"));
        }
        s.push('\n');
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

fn fmt_psnr(p: f64) -> String {
    if p.is_finite() {
        format!("{p:.4}")
    } else {
        "inf".into()
    }
}
