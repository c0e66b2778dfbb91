//! Post-training weight quantization.
//!
//! Tensors are flattened row-major and split into contiguous groups of
//! `group_size` weights, each with its own scale and zero point:
//! `w ≈ zero + scale · code`, `code ∈ [0, 2ᵇ − 1]`. A short tail group is
//! padded with its last value while quantizing; padding is never stored.
//!
//! The uniform quantizer maps each group's `[min, max]` onto the code range.
//! The half-quadratic quantizer keeps those scales and refines the zero
//! points: it alternates a generalized soft-threshold of the residual
//! (an ℓ_p, `p < 1`, proxy for outlier-robust error) with a closed-form
//! zero-point update, and keeps the best iterate under `Σ |W − Ŵ|ᵖ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GroupDecoder, SieddModel};
use crate::nn::{LinearLayer, Mlp};
use crate::tensor::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantMethod {
    Uniform,
    Hqq,
}

impl std::str::FromStr for QuantMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(QuantMethod::Uniform),
            "hqq" => Ok(QuantMethod::Hqq),
            other => Err(Error::config(format!("unknown quantization method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    pub method: QuantMethod,
    pub hqq_iters: usize,
    pub hqq_p: f32,
    /// Initial half-quadratic penalty.
    pub hqq_beta: f32,
    /// Growth factor of the penalty per iteration.
    pub hqq_kappa: f32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 6,
            group_size: 64,
            method: QuantMethod::Hqq,
            hqq_iters: 20,
            hqq_p: 0.7,
            hqq_beta: 10.0,
            hqq_kappa: 1.01,
        }
    }
}

impl QuantConfig {
    pub fn with_bits(bits: u8) -> Self {
        Self {
            bits,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::config(format!("{} quantization bits outside 2..=8", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::config("quantization group size must be positive"));
        }
        if !(self.hqq_p > 0.0 && self.hqq_p <= 1.0) {
            return Err(Error::config(format!("hqq p = {} outside (0, 1]", self.hqq_p)));
        }
        if !(self.hqq_beta > 0.0 && self.hqq_kappa >= 1.0) {
            return Err(Error::config("hqq penalty must be positive and non-decreasing"));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Group-wise `b`-bit codes of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub method: QuantMethod,
    /// One code per real element, row-major.
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_groups(&self) -> usize {
        self.len().div_ceil(self.group_size)
    }

    /// Codes bit-packed little-endian, `bits` per code.
    pub fn packed_codes(&self) -> Vec<u8> {
        pack_codes(&self.codes, self.bits)
    }

    /// Structural checks a decoder must pass before trusting the codes.
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) || self.group_size == 0 {
            return Err(Error::format(format!(
                "bad quantization parameters: {} bits, group size {}",
                self.bits, self.group_size
            )));
        }
        if self.codes.len() != self.len() {
            return Err(Error::format(format!(
                "{} codes for a {}x{} tensor",
                self.codes.len(),
                self.rows,
                self.cols
            )));
        }
        let groups = self.n_groups();
        if self.scales.len() != groups || self.zeros.len() != groups {
            return Err(Error::format(format!(
                "{} scales and {} zeros for {groups} groups",
                self.scales.len(),
                self.zeros.len()
            )));
        }
        let max = (1u32 << self.bits) - 1;
        if let Some(c) = self.codes.iter().find(|&&c| c as u32 > max) {
            return Err(Error::format(format!("code {c} exceeds {}-bit range", self.bits)));
        }
        if self.scales.iter().chain(&self.zeros).any(|v| !v.is_finite()) {
            return Err(Error::format("non-finite scale or zero point"));
        }
        Ok(())
    }
}

/// Packs `bits`-wide codes little-endian: code `i` starts at bit `i·bits`.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        let mut pos = i * bits;
        for b in 0..bits {
            if (c >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    let bits = bits as usize;
    if bytes.len() * 8 < n * bits {
        return Err(Error::format(format!("{} packed bytes cannot hold {n} codes", bytes.len())));
    }
    Ok((0..n)
        .map(|i| {
            let start = i * bits;
            (0..bits).fold(0u8, |acc, b| {
                let pos = start + b;
                acc | (((bytes[pos / 8] >> (pos % 8)) & 1) << b)
            })
        })
        .collect())
}

/// The group's values followed by copies of its last value up to `group_size`.
fn padded_group(w: &[f32], group_size: usize) -> Vec<f32> {
    let mut g = w.to_vec();
    let last = *g.last().expect("groups are never empty");
    g.resize(group_size, last);
    g
}

fn uniform_group(g: &[f32], max_code: u32) -> (f32, f32) {
    let (lo, hi) = g
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = (hi - lo) / max_code as f32;
    if scale > 0.0 && scale.is_finite() {
        (scale, lo)
    } else {
        (1.0, lo)
    }
}

fn code_for(w: f32, scale: f32, zero: f32, max_code: u32) -> u8 {
    ((w - zero) / scale).round().clamp(0.0, max_code as f32) as u8
}

fn check_input(w: &Tensor2D, cfg: &QuantConfig) -> Result<()> {
    cfg.validate()?;
    if !w.is_finite() {
        return Err(Error::Contract("cannot quantize a tensor with non-finite entries".into()));
    }
    Ok(())
}

/// Round-to-nearest over each group's `[min, max]`.
pub fn quantize_uniform(w: &Tensor2D, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    check_input(w, cfg)?;
    let max_code = cfg.max_code();
    let mut q = empty_like(w, cfg, QuantMethod::Uniform);
    for chunk in w.data().chunks(cfg.group_size) {
        let (scale, zero) = uniform_group(&padded_group(chunk, cfg.group_size), max_code);
        q.codes.extend(chunk.iter().map(|&v| code_for(v, scale, zero, max_code)));
        q.scales.push(scale);
        q.zeros.push(zero);
    }
    Ok(q)
}

fn empty_like(w: &Tensor2D, cfg: &QuantConfig, method: QuantMethod) -> QuantizedTensor {
    QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        bits: cfg.bits,
        group_size: cfg.group_size,
        method,
        codes: Vec::with_capacity(w.len()),
        scales: Vec::new(),
        zeros: Vec::new(),
    }
}

/// `sign(x) · max(|x| − |x|^(p−1)/β, 0)`.
pub fn shrink_lp(x: f32, beta: f32, p: f32) -> f32 {
    let a = x.abs();
    if a == 0.0 {
        return 0.0;
    }
    let t = a - a.powf(p - 1.0) / beta;
    x.signum() * t.max(0.0)
}

/// `Σ |w − (zero + scale·code)|ᵖ` over a group, in 64-bit.
pub fn robust_error(g: &[f32], scale: f32, zero: f32, max_code: u32, p: f32) -> f64 {
    g.iter()
        .map(|&v| {
            let r = v - (zero + scale * code_for(v, scale, zero, max_code) as f32);
            (r.abs() as f64).powf(p as f64)
        })
        .sum()
}

/// Half-quadratic zero-point refinement of one (padded) group. Returns the
/// zero point with the lowest robust error seen, starting from `zero`.
fn hqq_group(g: &[f32], scale: f32, zero: f32, cfg: &QuantConfig) -> f32 {
    let max_code = cfg.max_code();
    let p = cfg.hqq_p;
    let mut best_zero = zero;
    let mut best_err = robust_error(g, scale, zero, max_code, p);
    if best_err == 0.0 {
        return zero;
    }
    // zero point in code units: w ≈ (q − zc)·s
    let mut zc = -zero / scale;
    let mut beta = cfg.hqq_beta;
    let n = g.len() as f32;
    for _ in 0..cfg.hqq_iters {
        let mut acc = 0.0f32;
        for &v in g {
            let q = (v / scale + zc).round().clamp(0.0, max_code as f32);
            let e = shrink_lp(v - (q - zc) * scale, beta, p);
            acc += q - (v - e) / scale;
        }
        zc = acc / n;
        beta *= cfg.hqq_kappa;
        let candidate = -zc * scale;
        let err = robust_error(g, scale, candidate, max_code, p);
        if err < best_err {
            best_err = err;
            best_zero = candidate;
        }
    }
    best_zero
}

/// Uniform initialization followed by per-group half-quadratic zero-point
/// optimization with scales held fixed.
pub fn hqq_quantize(w: &Tensor2D, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    check_input(w, cfg)?;
    let max_code = cfg.max_code();
    let mut q = empty_like(w, cfg, QuantMethod::Hqq);
    for chunk in w.data().chunks(cfg.group_size) {
        let padded = padded_group(chunk, cfg.group_size);
        let (scale, zero0) = uniform_group(&padded, max_code);
        let zero = hqq_group(&padded, scale, zero0, cfg);
        q.codes.extend(chunk.iter().map(|&v| code_for(v, scale, zero, max_code)));
        q.scales.push(scale);
        q.zeros.push(zero);
    }
    Ok(q)
}

/// Quantizes with the configured method.
pub fn quantize(w: &Tensor2D, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    match cfg.method {
        QuantMethod::Uniform => quantize_uniform(w, cfg),
        QuantMethod::Hqq => hqq_quantize(w, cfg),
    }
}

/// `zero + scale · code` per group, restored to the original shape.
pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor2D> {
    q.validate()?;
    let mut data = Vec::with_capacity(q.len());
    for (g, chunk) in q.codes.chunks(q.group_size).enumerate() {
        let (s, z) = (q.scales[g], q.zeros[g]);
        data.extend(chunk.iter().map(|&c| z + s * c as f32));
    }
    Tensor2D::from_vec(q.rows, q.cols, data)
}

/// A decoder trunk layer as stored: quantized weight or raw, bias always raw.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredWeight {
    Quantized(QuantizedTensor),
    Raw(Tensor2D),
}

impl StoredWeight {
    pub fn to_tensor(&self) -> Result<Tensor2D> {
        match self {
            StoredWeight::Quantized(q) => dequantize(q),
            StoredWeight::Raw(t) => Ok(t.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTrunkLayer {
    pub weight: StoredWeight,
    pub bias: Vec<f32>,
}

/// One frame group ready for serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGroup {
    pub frames: Vec<usize>,
    pub trunk: Vec<StoredTrunkLayer>,
    /// Full-precision per-frame heads.
    pub heads: Vec<LinearLayer>,
}

/// Every decoder trunk quantized; the encoder and heads are untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    /// `None` stores trunks in full precision.
    pub quant: Option<QuantConfig>,
    pub groups: Vec<QuantizedGroup>,
}

/// Quantizes the trunk weights of every group. `None` keeps them raw.
pub fn quantize_model(model: &SieddModel, cfg: Option<&QuantConfig>) -> Result<QuantizedModel> {
    if let Some(c) = cfg {
        c.validate()?;
    }
    let groups = model
        .groups
        .iter()
        .map(|g| {
            let trunk = g
                .trunk
                .layers()
                .iter()
                .map(|l| {
                    let weight = match cfg {
                        Some(c) => StoredWeight::Quantized(quantize(&l.weight, c)?),
                        None => StoredWeight::Raw(l.weight.clone()),
                    };
                    Ok(StoredTrunkLayer {
                        weight,
                        bias: l.bias.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QuantizedGroup {
                frames: g.frames.clone(),
                trunk,
                heads: g.heads.heads().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        quant: cfg.copied(),
        groups,
    })
}

/// Rebuilds full-precision decoders from stored groups.
pub fn dequantize_groups(groups: &[QuantizedGroup], omega: f32) -> Result<Vec<GroupDecoder>> {
    groups
        .iter()
        .map(|g| {
            let layers = g
                .trunk
                .iter()
                .map(|l| LinearLayer::new(l.weight.to_tensor()?, l.bias.clone()))
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupDecoder {
                frames: g.frames.clone(),
                trunk: Mlp::from_layers(layers, omega, false)?,
                heads: crate::nn::BatchLinearLayer::from_heads(g.heads.clone())?,
            })
        })
        .collect()
}

/// The model a decoder will see: trunks replaced by their dequantized form.
pub fn apply_quantization(model: &SieddModel, qm: &QuantizedModel) -> Result<SieddModel> {
    Ok(SieddModel {
        config: model.config.clone(),
        meta: model.meta,
        encoder: model.encoder.clone(),
        groups: dequantize_groups(&qm.groups, model.config.omega)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(bits: u8, method: QuantMethod) -> QuantConfig {
        QuantConfig {
            bits,
            method,
            ..QuantConfig::default()
        }
    }

    fn gaussian(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
                ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
            })
            .collect()
    }

    #[test]
    fn constant_tensor_is_exact() {
        let w = Tensor2D::filled(3, 50, -0.375);
        for m in [QuantMethod::Uniform, QuantMethod::Hqq] {
            let q = quantize(&w, &cfg(4, m)).unwrap();
            assert!(q.codes.iter().all(|&c| c == 0));
            assert_eq!(dequantize(&q).unwrap(), w);
        }
        assert_eq!(
            quantize_uniform(&w, &cfg(4, QuantMethod::Uniform)).unwrap().zeros,
            hqq_quantize(&w, &cfg(4, QuantMethod::Hqq)).unwrap().zeros
        );
    }

    #[test]
    fn representable_grid_is_exact() {
        // 0, 1/4, …, 16/4 hits every 4-bit level of [0, 4] exactly
        let levels: Vec<f32> = (0..64).map(|i| (i % 16) as f32 * 0.25).collect();
        let w = Tensor2D::from_vec(1, 64, levels).unwrap();
        let q = quantize_uniform(&w, &cfg(4, QuantMethod::Uniform)).unwrap();
        assert_eq!(q.scales, vec![3.75 / 15.0]);
        let w = Tensor2D::from_vec(1, 64, (0..64).map(|i| (i % 16) as f32).collect()).unwrap();
        let q = quantize_uniform(&w, &cfg(4, QuantMethod::Uniform)).unwrap();
        assert_eq!(dequantize(&q).unwrap(), w);
    }

    #[test]
    fn uniform_error_within_half_step() {
        let data = gaussian(1024, 3);
        let w = Tensor2D::from_vec(16, 64, data.clone()).unwrap();
        let c = cfg(8, QuantMethod::Uniform);
        let q = quantize_uniform(&w, &c).unwrap();
        let d = dequantize(&q).unwrap();
        for (g, chunk) in data.chunks(64).enumerate() {
            // scalar oracle in 64-bit
            let lo = chunk.iter().cloned().fold(f64::INFINITY, |a, b| a.min(b as f64));
            let hi = chunk.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
            let step = (hi - lo) / 255.0;
            assert!(((q.scales[g] as f64) - step).abs() < 1e-6 * step.max(1.0));
            for (k, &v) in chunk.iter().enumerate() {
                let err = (d.data()[g * 64 + k] as f64 - v as f64).abs();
                assert!(err <= step / 2.0 + 1e-6, "group {g}: err {err} step {step}");
            }
        }
    }

    #[test]
    fn hqq_zero_iterations_is_uniform() {
        let w = Tensor2D::from_vec(4, 50, gaussian(200, 5)).unwrap();
        let c = QuantConfig {
            hqq_iters: 0,
            ..cfg(5, QuantMethod::Hqq)
        };
        let h = hqq_quantize(&w, &c).unwrap();
        let u = quantize_uniform(&w, &c).unwrap();
        assert_eq!((h.codes, h.scales, h.zeros), (u.codes, u.scales, u.zeros));
    }

    #[test]
    fn hqq_beats_uniform_on_outliers() {
        let mut data = gaussian(4096, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..41 {
            let i = rng.gen_range(0..data.len());
            data[i] = if rng.gen() { 12.0 } else { -12.0 } * rng.gen_range(1.0..1.5f32);
        }
        let w = Tensor2D::from_vec(64, 64, data.clone()).unwrap();
        let mean_err = |q: &QuantizedTensor| -> f64 {
            let d = dequantize(q).unwrap();
            d.data().iter().zip(&data).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / data.len() as f64
        };
        let u = mean_err(&quantize_uniform(&w, &cfg(4, QuantMethod::Uniform)).unwrap());
        let h = mean_err(&hqq_quantize(&w, &cfg(4, QuantMethod::Hqq)).unwrap());
        assert!(h < u, "hqq {h} vs uniform {u}");
    }

    #[test]
    fn all_zero_codes_give_zero_points() {
        let q = QuantizedTensor {
            rows: 2,
            cols: 3,
            bits: 4,
            group_size: 4,
            method: QuantMethod::Uniform,
            codes: vec![0; 6],
            scales: vec![0.5, 2.0],
            zeros: vec![-1.0, 3.0],
        };
        assert_eq!(dequantize(&q).unwrap().data(), &[-1.0, -1.0, -1.0, -1.0, 3.0, 3.0]);
    }

    #[test]
    fn out_of_range_code_is_format_error() {
        let mut q = quantize_uniform(&Tensor2D::from_fn(1, 8, |_, c| c as f32), &cfg(4, QuantMethod::Uniform)).unwrap();
        q.codes[3] = 16;
        assert!(matches!(dequantize(&q), Err(Error::Format(_))));
    }

    #[test]
    fn tail_group_padding_is_dropped() {
        let w = Tensor2D::from_fn(3, 7, |r, c| (r * 7 + c) as f32 * 0.1);
        let q = quantize_uniform(&w, &cfg(6, QuantMethod::Uniform)).unwrap();
        assert_eq!(q.codes.len(), 21);
        assert_eq!(q.n_groups(), 1);
        assert_eq!(dequantize(&q).unwrap().shape(), (3, 7));
    }

    #[test]
    fn packing_round_trip() {
        for bits in 2..=8u8 {
            let codes: Vec<u8> = (0..101).map(|i| (i * 37 % (1 << bits)) as u8).collect();
            let packed = pack_codes(&codes, bits);
            assert_eq!(packed.len(), (101 * bits as usize).div_ceil(8));
            assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
        }
        // 4-bit little-endian nibbles
        assert_eq!(pack_codes(&[0x1, 0x2, 0x3], 4), vec![0x21, 0x03]);
    }

    #[test]
    fn shrink_threshold() {
        assert_eq!(shrink_lp(0.0, 10.0, 0.7), 0.0);
        // below threshold → zero; far above → close to identity
        assert_eq!(shrink_lp(0.01, 10.0, 0.7), 0.0);
        let big = shrink_lp(-5.0, 10.0, 0.7);
        assert!(big < -4.9 && big > -5.0);
    }
}
