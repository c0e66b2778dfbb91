//! Independent 64-bit reference implementations shared by the integration
//! tests and the acceptance harness.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siedd::model::GroupDecoder;
use siedd::nn::{Mlp, Parameters};
use siedd::video::Frame;
use siedd::Tensor2D;

/// One dense layer of the shadow network, referencing its tensors by index.
#[derive(Clone, Debug)]
struct ShadowLayer {
    in_dim: usize,
    out_dim: usize,
    sine: bool,
    w: usize,
    b: usize,
}

/// A 64-bit copy of `encoder → trunk → heads` evaluated with scalar loops.
#[derive(Clone, Debug)]
pub struct ShadowNet {
    /// Parameter tensors in the engine's gradient order.
    pub tensors: Vec<Vec<f64>>,
    stack: Vec<ShadowLayer>,
    heads: Vec<ShadowLayer>,
    omega: f64,
}

fn push_mlp(mlp: &Mlp, tensors: &mut Vec<Vec<f64>>, stack: &mut Vec<ShadowLayer>) {
    let n = mlp.layers().len();
    for (l, layer) in mlp.layers().iter().enumerate() {
        let p = layer.param_slices();
        let w = tensors.len();
        tensors.push(p[0].iter().map(|&v| v as f64).collect());
        tensors.push(p[1].iter().map(|&v| v as f64).collect());
        stack.push(ShadowLayer {
            in_dim: layer.in_dim(),
            out_dim: layer.out_dim(),
            sine: l + 1 < n || !mlp.linear_output(),
            w,
            b: w + 1,
        });
    }
}

impl ShadowNet {
    pub fn new(encoder: &Mlp, decoder: &GroupDecoder) -> Self {
        let mut tensors = Vec::new();
        let mut stack = Vec::new();
        push_mlp(encoder, &mut tensors, &mut stack);
        push_mlp(&decoder.trunk, &mut tensors, &mut stack);
        let mut heads = Vec::new();
        for head in decoder.heads.heads() {
            let p = head.param_slices();
            let w = tensors.len();
            tensors.push(p[0].iter().map(|&v| v as f64).collect());
            tensors.push(p[1].iter().map(|&v| v as f64).collect());
            heads.push(ShadowLayer {
                in_dim: head.in_dim(),
                out_dim: head.out_dim(),
                sine: false,
                w,
                b: w + 1,
            });
        }
        Self {
            tensors,
            stack,
            heads,
            omega: encoder.omega() as f64,
        }
    }

    /// A plain MLP (no heads) with the given output layout.
    pub fn from_mlp(mlp: &Mlp) -> Self {
        let mut tensors = Vec::new();
        let mut stack = Vec::new();
        push_mlp(mlp, &mut tensors, &mut stack);
        Self {
            tensors,
            stack,
            heads: Vec::new(),
            omega: mlp.omega() as f64,
        }
    }

    fn dense(&self, t: &[Vec<f64>], l: &ShadowLayer, x: &[f64]) -> Vec<f64> {
        (0..l.out_dim)
            .map(|o| {
                let mut acc = t[l.b][o];
                for i in 0..l.in_dim {
                    acc += t[l.w][o * l.in_dim + i] * x[i];
                }
                if l.sine {
                    (self.omega * acc).sin()
                } else {
                    acc
                }
            })
            .collect()
    }

    /// Network output for one input row.
    pub fn forward_row(&self, t: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.stack {
            h = self.dense(t, l, &h);
        }
        if self.heads.is_empty() {
            return h;
        }
        self.heads.iter().flat_map(|l| self.dense(t, l, &h)).collect()
    }

    /// Mean squared error over every output value of every row.
    pub fn loss(&self, t: &[Vec<f64>], input: &Tensor2D, target: &Tensor2D) -> f64 {
        let mut sum = 0.0;
        for r in 0..input.rows() {
            let x: Vec<f64> = input.row(r).iter().map(|&v| v as f64).collect();
            let y = self.forward_row(t, &x);
            for (p, &q) in y.iter().zip(target.row(r)) {
                sum += (p - q as f64).powi(2);
            }
        }
        sum / (input.rows() * target.cols()) as f64
    }

    /// Five-point central differences of the loss for every parameter.
    pub fn fd_gradients(&self, input: &Tensor2D, target: &Tensor2D, h: f64) -> Vec<Vec<f64>> {
        let mut t = self.tensors.clone();
        let mut out = Vec::with_capacity(t.len());
        for k in 0..t.len() {
            let mut g = vec![0.0; t[k].len()];
            for (i, gi) in g.iter_mut().enumerate() {
                let v = t[k][i];
                let mut at = |d: f64| {
                    t[k][i] = v + d;
                    self.loss(&t, input, target)
                };
                let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
                *gi = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
                t[k][i] = v;
            }
            out.push(g);
        }
        out
    }
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(a: &[f32], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

pub fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Frame {
    let data = (0..h * w * 3).map(|_| rng.gen::<f32>()).collect();
    Frame::new(h, w, data).unwrap()
}

/// `frame` plus uniform noise of the given amplitude, clamped.
pub fn noisy(rng: &mut ChaCha8Rng, frame: &Frame, amplitude: f32) -> Frame {
    let data = frame
        .data()
        .iter()
        .map(|&v| (v + amplitude * (rng.gen::<f32>() * 2.0 - 1.0)).clamp(0.0, 1.0))
        .collect();
    Frame::new(frame.height(), frame.width(), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// PSNR with a plain scalar loop, peak 1.
pub fn psnr_oracle(a: &Frame, b: &Frame) -> f64 {
    let mut sum = 0.0f64;
    let n = a.data().len();
    for i in 0..n {
        let d = a.data()[i] as f64 - b.data()[i] as f64;
        sum += d * d;
    }
    10.0 * (1.0 / (sum / n as f64)).log10()
}

fn luma_at(f: &Frame, y: usize, x: usize) -> f64 {
    let p = f.pixel(y, x);
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// SSIM computed window by window with a full 2D Gaussian kernel.
pub fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut kernel = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (i, row) in kernel.iter_mut().enumerate() {
        for (j, k) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *k = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *k;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=h - N {
        for x0 in 0..=w - N {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..N {
                for j in 0..N {
                    let k = kernel[i][j] / total;
                    let (u, v) = (luma_at(a, y0 + i, x0 + j), luma_at(b, y0 + i, x0 + j));
                    mx += k * u;
                    my += k * v;
                    sxx += k * u * u;
                    syy += k * v * v;
                    sxy += k * u * v;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Textbook Huffman code lengths: repeatedly merge the two lightest trees.
pub fn huffman_lengths_oracle(freqs: &[u64]) -> Vec<u32> {
    // each tree: (weight, symbols)
    let mut trees: Vec<(u64, Vec<usize>)> = freqs
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > 0)
        .map(|(s, &f)| (f, vec![s]))
        .collect();
    let mut lengths = vec![0u32; freqs.len()];
    if trees.len() == 1 {
        lengths[trees[0].1[0]] = 1;
        return lengths;
    }
    while trees.len() > 1 {
        trees.sort_by_key(|t| std::cmp::Reverse(t.0));
        let (wa, sa) = trees.pop().unwrap();
        let (wb, sb) = trees.pop().unwrap();
        for &s in sa.iter().chain(&sb) {
            lengths[s] += 1;
        }
        trees.push((wa + wb, sa.into_iter().chain(sb).collect()));
    }
    lengths
}

/// Reference schedule-free AdamW on a flat vector in 64-bit. Returns the
/// averaged iterate after every step.
pub fn sf_adamw_reference(
    w0: &[f64],
    grad: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Vec<Vec<f64>> {
    let mut z = w0.to_vec();
    let mut x = w0.to_vec();
    let mut v = vec![0.0; w0.len()];
    let mut history = Vec::with_capacity(steps);
    for t in 1..=steps {
        let y: Vec<f64> = (0..z.len()).map(|i| (1.0 - beta1) * z[i] + beta1 * x[i]).collect();
        let g = grad(&y);
        let c = 1.0 / t as f64;
        let bc2 = 1.0 - beta2.powi(t as i32);
        for i in 0..z.len() {
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            z[i] -= lr * (g[i] / ((v[i] / bc2).sqrt() + eps) + weight_decay * y[i]);
            x[i] = (1.0 - c) * x[i] + c * z[i];
        }
        history.push(x.clone());
    }
    history
}

/// 2× box (bilinear at half-pixel alignment) downsampling.
pub fn downsample2(f: &Frame) -> Frame {
    let (h, w) = (f.height() / 2, f.width() / 2);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let s = f.pixel(2 * y, 2 * x)[c]
                    + f.pixel(2 * y, 2 * x + 1)[c]
                    + f.pixel(2 * y + 1, 2 * x)[c]
                    + f.pixel(2 * y + 1, 2 * x + 1)[c];
                data.push(s / 4.0);
            }
        }
    }
    Frame::new(h, w, data).unwrap()
}

/// Largest per-tensor relative error between the engine's gradients of a
/// full `encoder → trunk → heads` network and finite differences of its
/// 64-bit shadow.
pub fn composite_gradient_error(dim: usize, dec_hidden: usize, heads: usize, patch: usize, seed: u64) -> f64 {
    use siedd::coords::PosEncoding;
    use siedd::model::{build_model, ModelConfig, VideoMeta};
    use siedd::trainer::network_gradients;

    let cfg = ModelConfig {
        dim,
        enc_hidden_layers: 1,
        dec_hidden_layers: dec_hidden,
        omega: 30.0,
        patch,
        pos_encoding: PosEncoding::new(2, true).unwrap(),
    };
    let meta = VideoMeta {
        height: 8 * patch,
        width: 8 * patch,
        frames: heads,
        fps: 30.0,
    };
    let anchors: Vec<usize> = (0..heads).collect();
    let mut model = build_model(&cfg, meta, &anchors, seed).unwrap();
    // heads start small; give them weight so every path carries gradient
    let mut r = rng(seed ^ 0xfeed);
    for p in model.groups[0].heads.param_slices_mut() {
        p.iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
    }
    let batch = 6;
    let coords = Tensor2D::from_fn(batch, 2, |_, _| r.gen_range(-1.0..1.0));
    let features = cfg.pos_encoding.encode(&coords).unwrap();
    let target = Tensor2D::from_fn(batch, heads * cfg.out_channels(), |_, _| r.gen::<f32>());

    let (loss, grads) = network_gradients(&model.encoder.mlp, &model.groups[0], &features, &target).unwrap();
    let shadow = ShadowNet::new(&model.encoder.mlp, &model.groups[0]);
    let shadow_loss = shadow.loss(&shadow.tensors, &features, &target);
    assert!((loss - shadow_loss).abs() <= 1e-5 * shadow_loss.max(1e-3), "{loss} vs {shadow_loss}");
    let fd = shadow.fd_gradients(&features, &target, 1e-3);
    assert_eq!(grads.len(), fd.len());
    grads
        .iter()
        .zip(&fd)
        .map(|(g, f)| relative_error(g, f, 1e-6))
        .fold(0.0, f64::max)
}

/// The same check for a standalone MLP under an L2 loss.
pub fn mlp_gradient_error(dims: &[usize], linear_output: bool, seed: u64) -> f64 {
    use siedd::nn::{GradTape, InitPosition};
    use siedd::trainer::l2_loss;

    let mut mlp = Mlp::new(dims, 30.0, linear_output).unwrap();
    mlp.siren_init(seed, InitPosition::Input).unwrap();
    let mut r = rng(seed);
    let batch = 5;
    let input = Tensor2D::from_fn(batch, dims[0], |_, _| r.gen_range(-1.0..1.0));
    let target = Tensor2D::from_fn(batch, *dims.last().unwrap(), |_, _| r.gen_range(-1.0..1.0));
    let mut tape = GradTape::new();
    let pred = mlp.forward(&input, Some(&mut tape)).unwrap();
    let (_, d) = l2_loss(&pred, &target).unwrap();
    let (grads, _) = mlp.backward(&tape, &d, false).unwrap();
    let shadow = ShadowNet::from_mlp(&mlp);
    let fd = shadow.fd_gradients(&input, &target, 1e-3);
    grads
        .param_slices()
        .iter()
        .zip(&fd)
        .map(|(g, f)| relative_error(g, f, 1e-6))
        .fold(0.0, f64::max)
}

/// A small, fast configuration: width `dim`, three frequencies, no logging.
pub fn tiny_options(dim: usize, group_size: usize, iters: usize) -> siedd::codec::EncodeOptions {
    use siedd::coords::PosEncoding;
    use siedd::model::{ModelConfig, Preset};
    use siedd::trainer::TrainConfig;

    let mut model = ModelConfig::preset(Preset::Toy);
    model.dim = dim;
    model.pos_encoding = PosEncoding::new(3, true).unwrap();
    let mut train = TrainConfig::toy();
    train.group_size = group_size;
    train.stage1_iters = iters;
    train.stage2_iters = iters;
    train.log_every = 0;
    siedd::codec::EncodeOptions::new(model, train)
}
