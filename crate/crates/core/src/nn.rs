//! Minimal dense-MLP engine: affine layers, sine activations, reverse-mode
//! gradients through a recorded tape, and batched per-head output layers.
//!
//! Sine layers compute `sin(ω · (W x + b))`; the frequency is folded into the
//! activation, never into the weights.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatMut, MatRef, Tensor2D};
use crate::trig;

/// Anything that exposes its trainable tensors as flat slices in a fixed order.
///
/// Gradient containers implement this with the same ordering as the
/// parameters they were computed for, which is what the optimizer relies on.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f32]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f32]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

/// `y = x · Wᵀ + b` with `W` stored `out_dim × in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor2D,
    pub bias: Vec<f32>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor2D::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn new(weight: Tensor2D, bias: Vec<f32>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::shape(format!(
                "weight has {} output rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "layer expects {} input features, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut out = Tensor2D::zeros(x.rows(), self.out_dim());
        let row_stride = self.out_dim();
        self.forward_into(x, out.data_mut(), row_stride);
        Ok(out)
    }

    /// Writes the affine output into a strided window (`row_stride` ≥ out_dim).
    pub(crate) fn forward_into(&self, x: &Tensor2D, out: &mut [f32], row_stride: usize) {
        let out_dim = self.out_dim();
        for r in 0..x.rows() {
            out[r * row_stride..r * row_stride + out_dim].copy_from_slice(&self.bias);
        }
        gemm(
            MatRef::new(x),
            MatRef::new(&self.weight).t(),
            MatMut {
                data: out,
                rows: x.rows(),
                cols: out_dim,
                row_stride: row_stride as isize,
            },
            1.0,
        );
    }
}

impl Parameters for LinearLayer {
    fn param_slices(&self) -> Vec<&[f32]> {
        vec![self.weight.data(), &self.bias]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }
}

/// Which initialization bound a layer stack starts with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitPosition {
    /// The stack receives raw network input: its first layer uses `U(±1/fan_in)`.
    Input,
    /// The stack sits behind other sine layers: every layer uses `U(±√(6/fan_in)/ω)`.
    Hidden,
}

/// Weight bound used by the sine-network initialization scheme.
pub fn siren_bound(fan_in: usize, omega: f32, first: bool) -> f32 {
    if first {
        1.0 / fan_in as f32
    } else {
        (6.0 / fan_in as f32).sqrt() / omega
    }
}

/// Stack of affine layers. All hidden layers use `sin(ω·)`; the last layer is
/// linear when `linear_output` is set and sine otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
    omega: f32,
    linear_output: bool,
}

/// Forward activations recorded for a later backward pass.
#[derive(Debug, Default)]
pub struct GradTape {
    // activations[0] is the input, activations[l + 1] the output of layer l.
    activations: Vec<Tensor2D>,
    // cos(ω·(Wx+b)) for sine layers; empty tensor for a linear layer.
    cosines: Vec<Tensor2D>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn clear(&mut self) {
        self.activations.clear();
        self.cosines.clear();
    }
}

/// Parameter gradients shaped exactly like the [`Mlp`] they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LinearLayer>,
}

impl Parameters for MlpGrads {
    fn param_slices(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}

impl Mlp {
    /// Zero-initialized stack with widths `dims[0] → dims[1] → … → dims[n]`.
    pub fn new(dims: &[usize], omega: f32, linear_output: bool) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        if dims.contains(&0) {
            return Err(Error::config(format!("zero-width layer in {dims:?}")));
        }
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::config(format!("omega must be positive, got {omega}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| LinearLayer::zeros(w[0], w[1]))
            .collect();
        Ok(Self {
            layers,
            omega,
            linear_output,
        })
    }

    pub fn from_layers(layers: Vec<LinearLayer>, omega: f32, linear_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].out_dim(),
                    w[1].in_dim()
                )));
            }
        }
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::config(format!("omega must be positive, got {omega}")));
        }
        Ok(Self {
            layers,
            omega,
            linear_output,
        })
    }

    #[inline]
    pub fn omega(&self) -> f32 {
        self.omega
    }

    #[inline]
    pub fn linear_output(&self) -> bool {
        self.linear_output
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn is_sine(&self, layer: usize) -> bool {
        !(self.linear_output && layer + 1 == self.layers.len())
    }

    /// Re-draws all weights with the sine-network scheme and zeroes biases.
    pub fn siren_init(&mut self, seed: u64, position: InitPosition) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let fan_in = layer.in_dim();
            if fan_in == 0 {
                return Err(Error::config("zero fan-in in sine initialization"));
            }
            let bound = siren_bound(fan_in, self.omega, l == 0 && position == InitPosition::Input);
            let dist = Uniform::new_inclusive(-bound, bound);
            for w in layer.weight.data_mut() {
                *w = dist.sample(&mut rng);
            }
            layer.bias.fill(0.0);
        }
        Ok(())
    }

    /// Runs the stack. With a tape, every intermediate needed by
    /// [`Mlp::backward`] is recorded (replacing previous contents).
    pub fn forward(&self, x: &Tensor2D, mut tape: Option<&mut GradTape>) -> Result<Tensor2D> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "MLP expects {} input features, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        if let Some(t) = tape.as_deref_mut() {
            t.clear();
            t.activations.push(x.clone());
        }
        let omega = self.omega;
        let mut h: Option<Tensor2D> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let input = h.as_ref().unwrap_or(x);
            let mut z = layer.forward(input)?;
            if self.is_sine(l) {
                z.scale(omega);
                match tape.as_deref_mut() {
                    Some(t) => {
                        let mut cos = Tensor2D::zeros(z.rows(), z.cols());
                        trig::sin_cos_inplace(z.data_mut(), cos.data_mut());
                        t.cosines.push(cos);
                        t.activations.push(z.clone());
                    }
                    None => trig::sin_inplace(z.data_mut()),
                }
                h = Some(z);
            } else {
                if let Some(t) = tape.as_deref_mut() {
                    t.cosines.push(Tensor2D::zeros(0, 0));
                    t.activations.push(z.clone());
                }
                h = Some(z);
            }
        }
        Ok(h.expect("at least one layer"))
    }

    /// Reverse pass for the tape of the most recent taped forward.
    ///
    /// Returns parameter gradients and, when `want_input_grad` is set, the
    /// gradient with respect to the forward input.
    pub fn backward(
        &self,
        tape: &GradTape,
        d_out: &Tensor2D,
        want_input_grad: bool,
    ) -> Result<(MlpGrads, Option<Tensor2D>)> {
        let n = self.layers.len();
        if tape.activations.len() != n + 1 || tape.cosines.len() != n {
            return Err(Error::Contract(format!(
                "tape records {} layers, network has {n}",
                tape.cosines.len()
            )));
        }
        let batch = tape.activations[0].rows();
        if d_out.shape() != (batch, self.out_dim()) {
            return Err(Error::Contract(format!(
                "upstream gradient is {:?}, forward output was {:?}",
                d_out.shape(),
                (batch, self.out_dim())
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if tape.activations[l].cols() != layer.in_dim() {
                return Err(Error::Contract(format!("tape layer {l} width mismatch")));
            }
        }

        let omega = self.omega;
        let mut grads: Vec<LinearLayer> = Vec::with_capacity(n);
        let mut d = d_out.clone();
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if self.is_sine(l) {
                for (g, &c) in d.data_mut().iter_mut().zip(tape.cosines[l].data()) {
                    *g *= omega * c;
                }
            }
            let input = &tape.activations[l];
            let mut dw = Tensor2D::zeros(layer.out_dim(), layer.in_dim());
            gemm(MatRef::new(&d).t(), MatRef::new(input), MatMut::new(&mut dw), 0.0);
            let db = column_sums(&d);
            grads.push(LinearLayer { weight: dw, bias: db });

            if l > 0 || want_input_grad {
                let mut dx = Tensor2D::zeros(batch, layer.in_dim());
                gemm(MatRef::new(&d), MatRef::new(&layer.weight), MatMut::new(&mut dx), 0.0);
                d = dx;
            }
        }
        grads.reverse();
        let d_in = want_input_grad.then_some(d);
        Ok((MlpGrads { layers: grads }, d_in))
    }

    /// Zeroed gradient container with this network's shapes.
    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LinearLayer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }
}

impl Parameters for Mlp {
    fn param_slices(&self) -> Vec<&[f32]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}

pub(crate) fn column_sums(t: &Tensor2D) -> Vec<f32> {
    let mut out = vec![0.0f32; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// `n_heads` independent linear layers that share one input.
///
/// The output of head `h` occupies columns `h·out_dim .. (h+1)·out_dim` of a
/// `batch × (n_heads·out_dim)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLinearLayer {
    heads: Vec<LinearLayer>,
}

impl BatchLinearLayer {
    pub fn zeros(n_heads: usize, in_dim: usize, out_dim: usize) -> Self {
        Self {
            heads: (0..n_heads)
                .map(|_| LinearLayer::zeros(in_dim, out_dim))
                .collect(),
        }
    }

    pub fn from_heads(heads: Vec<LinearLayer>) -> Result<Self> {
        if let Some(first) = heads.first() {
            let dims = (first.in_dim(), first.out_dim());
            if let Some(bad) = heads.iter().position(|h| (h.in_dim(), h.out_dim()) != dims) {
                return Err(Error::shape(format!(
                    "head {bad} is {}x{}, head 0 is {}x{}",
                    heads[bad].out_dim(),
                    heads[bad].in_dim(),
                    dims.1,
                    dims.0
                )));
            }
        }
        Ok(Self { heads })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn in_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.in_dim())
    }

    pub fn out_dim(&self) -> usize {
        self.heads.first().map_or(0, |h| h.out_dim())
    }

    pub fn heads(&self) -> &[LinearLayer] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.heads
    }

    pub fn into_heads(self) -> Vec<LinearLayer> {
        self.heads
    }

    /// Hidden-layer sine initialization for every head, deterministic in `seed`.
    pub fn siren_init(&mut self, seed: u64, omega: f32) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for head in &mut self.heads {
            if head.in_dim() == 0 {
                return Err(Error::config("zero fan-in in sine initialization"));
            }
            let bound = siren_bound(head.in_dim(), omega, false);
            let dist = Uniform::new_inclusive(-bound, bound);
            for w in head.weight.data_mut() {
                *w = dist.sample(&mut rng);
            }
            head.bias.fill(0.0);
        }
        Ok(())
    }

    pub fn forward(&self, z: &Tensor2D) -> Result<Tensor2D> {
        if z.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "heads expect {} input features, got {}",
                self.in_dim(),
                z.cols()
            )));
        }
        let out_dim = self.out_dim();
        let width = self.n_heads() * out_dim;
        let mut out = Tensor2D::zeros(z.rows(), width);
        for (h, head) in self.heads.iter().enumerate() {
            head.forward_into(z, &mut out.data_mut()[h * out_dim..], width);
        }
        Ok(out)
    }

    /// Gradients of every head and of the shared input, given the forward
    /// input `z` and the upstream gradient laid out like [`Self::forward`]'s output.
    pub fn backward(
        &self,
        z: &Tensor2D,
        d_out: &Tensor2D,
        want_input_grad: bool,
    ) -> Result<(BatchLinearLayer, Option<Tensor2D>)> {
        let out_dim = self.out_dim();
        let width = self.n_heads() * out_dim;
        if z.cols() != self.in_dim() || d_out.shape() != (z.rows(), width) {
            return Err(Error::Contract(format!(
                "head backward got input {:?} and gradient {:?}",
                z.shape(),
                d_out.shape()
            )));
        }
        let batch = z.rows();
        let mut grads = Vec::with_capacity(self.n_heads());
        let mut dz = want_input_grad.then(|| Tensor2D::zeros(batch, self.in_dim()));
        for (h, head) in self.heads.iter().enumerate() {
            let d_h = MatRef {
                data: &d_out.data()[h * out_dim..],
                rows: batch,
                cols: out_dim,
                row_stride: width as isize,
                col_stride: 1,
            };
            let mut dw = Tensor2D::zeros(out_dim, self.in_dim());
            gemm(d_h.t(), MatRef::new(z), MatMut::new(&mut dw), 0.0);
            let mut db = vec![0.0f32; out_dim];
            for r in 0..batch {
                let row = &d_out.data()[r * width + h * out_dim..r * width + (h + 1) * out_dim];
                for (o, v) in db.iter_mut().zip(row) {
                    *o += v;
                }
            }
            grads.push(LinearLayer { weight: dw, bias: db });
            if let Some(dz) = dz.as_mut() {
                let beta = if h == 0 { 0.0 } else { 1.0 };
                gemm(d_h, MatRef::new(&head.weight), MatMut::new(dz), beta);
            }
        }
        Ok((BatchLinearLayer { heads: grads }, dz))
    }
}

impl Parameters for BatchLinearLayer {
    fn param_slices(&self) -> Vec<&[f32]> {
        self.heads.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        self.heads
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}
