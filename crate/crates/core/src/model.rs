//! The SIEDD network: frozen frequency encoding → shared sine encoder →
//! per-group sine trunk → one linear head per frame.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::coords::{CoordGrid, PosEncoding};
use crate::error::{Error, Result};
use crate::nn::{BatchLinearLayer, InitPosition, LinearLayer, Mlp, Parameters};
use crate::tensor::Tensor2D;
use crate::video::Frame;

/// Named model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    S,
    M,
    L,
    /// Desk-scale configuration used by the test suite.
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Preset::S),
            "m" => Ok(Preset::M),
            "l" => Ok(Preset::L),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::config(format!("unknown preset {other:?} (expected S, M, L or toy)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent width shared by the encoder output and every trunk layer.
    pub dim: usize,
    pub enc_hidden_layers: usize,
    pub dec_hidden_layers: usize,
    pub omega: f32,
    pub patch: usize,
    pub pos_encoding: PosEncoding,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (dim, n_freqs) = match p {
            Preset::S => (512, 16),
            Preset::M => (768, 16),
            Preset::L => (1024, 16),
            Preset::Toy => (128, 8),
        };
        Self {
            dim,
            enc_hidden_layers: 1,
            dec_hidden_layers: 3,
            omega: 30.0,
            patch: 1,
            pos_encoding: PosEncoding::new(n_freqs, true).expect("preset encoding is valid"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("model dimension must be positive"));
        }
        if self.enc_hidden_layers == 0 || self.dec_hidden_layers == 0 {
            return Err(Error::config("encoder and decoder need at least one hidden layer"));
        }
        if self.patch == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::config(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    /// Values predicted per coordinate per frame: an RGB `p×p` patch.
    pub fn out_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Widths of the encoder: `in → d`, then `enc_hidden_layers` × `d → d`.
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.pos_encoding.out_dim()];
        dims.extend(std::iter::repeat(self.dim).take(self.enc_hidden_layers + 1));
        dims
    }

    /// Widths of a decoder trunk: `dec_hidden_layers` × `d → d`.
    pub fn trunk_dims(&self) -> Vec<usize> {
        vec![self.dim; self.dec_hidden_layers + 1]
    }
}

/// Source video properties carried with the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub fps: f32,
}

/// `f_θ`: positional features → latent. Every layer is sine-activated,
/// including the one producing the latent.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedEncoder {
    pub mlp: Mlp,
}

impl SharedEncoder {
    pub fn forward(&self, features: &Tensor2D) -> Result<Tensor2D> {
        self.mlp.forward(features, None)
    }

    /// Order-sensitive hash of every encoder parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in self.mlp.param_slices() {
            h.write_usize(s.len());
            for v in s {
                h.write_u32(v.to_bits());
            }
        }
        h.finish()
    }
}

/// Shared sine trunk plus one linear head per frame of the group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDecoder {
    /// Source frame index predicted by each head, ascending.
    pub frames: Vec<usize>,
    pub trunk: Mlp,
    pub heads: BatchLinearLayer,
}

impl GroupDecoder {
    /// Freshly initialized decoder for the listed frames.
    pub fn siren(cfg: &ModelConfig, frames: Vec<usize>, seed: u64) -> Result<Self> {
        let mut trunk = Mlp::new(&cfg.trunk_dims(), cfg.omega, false)?;
        trunk.siren_init(mix_seed(seed, 2), InitPosition::Hidden)?;
        let mut heads = BatchLinearLayer::zeros(frames.len(), cfg.dim, cfg.out_channels());
        heads.siren_init(mix_seed(seed, 3), cfg.omega)?;
        Ok(Self {
            frames,
            trunk,
            heads,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.n_heads()
    }

    /// `latent → trunk → heads`, output `batch × (n_heads · 3p²)`.
    pub fn forward(&self, latent: &Tensor2D) -> Result<Tensor2D> {
        let h = self.trunk.forward(latent, None)?;
        self.heads.forward(&h)
    }

    /// Contiguous frame range covered, if the frame list is contiguous.
    pub fn frame_range(&self) -> Option<Range<usize>> {
        let first = *self.frames.first()?;
        let contiguous = self.frames.iter().enumerate().all(|(k, &f)| f == first + k);
        contiguous.then(|| first..first + self.frames.len())
    }
}

impl Parameters for GroupDecoder {
    fn param_slices(&self) -> Vec<&[f32]> {
        let mut v = self.trunk.param_slices();
        v.extend(self.heads.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v = self.trunk.param_slices_mut();
        v.extend(self.heads.param_slices_mut());
        v
    }
}

/// The complete network: `concat_i(g_i ∘ f ∘ γ)` over every frame group.
#[derive(Clone, Debug, PartialEq)]
pub struct SieddModel {
    pub config: ModelConfig,
    pub meta: VideoMeta,
    pub encoder: SharedEncoder,
    pub groups: Vec<GroupDecoder>,
}

impl SieddModel {
    /// Positional features then encoder latent for arbitrary coordinates.
    pub fn latents(&self, coords: &Tensor2D) -> Result<Tensor2D> {
        let features = self.config.pos_encoding.encode(coords)?;
        self.encoder.forward(&features)
    }

    /// Raw (unclamped) predictions of group `g` at explicit coordinates.
    pub fn forward_coords(&self, g: usize, coords: &Tensor2D) -> Result<Tensor2D> {
        let group = self.group(g)?;
        group.forward(&self.latents(coords)?)
    }

    pub fn group(&self, g: usize) -> Result<&GroupDecoder> {
        self.groups.get(g).ok_or_else(|| {
            Error::Contract(format!("group {g} out of range ({} groups)", self.groups.len()))
        })
    }

    /// Frame indices covered by all groups, in order.
    pub fn frame_count(&self) -> usize {
        self.groups.iter().map(|g| g.n_heads()).sum()
    }
}

/// Derives independent sub-seeds (SplitMix64 finalizer over `seed + k·φ`).
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stage-1 network: encoder plus one decoder whose heads predict the anchor frames.
pub fn build_model(cfg: &ModelConfig, meta: VideoMeta, anchors: &[usize], seed: u64) -> Result<SieddModel> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(Error::config("stage 1 needs at least one anchor frame"));
    }
    if meta.height % cfg.patch != 0 || meta.width % cfg.patch != 0 {
        return Err(Error::config(format!(
            "patch size {} does not divide {}x{}",
            cfg.patch, meta.height, meta.width
        )));
    }
    let mut mlp = Mlp::new(&cfg.encoder_dims(), cfg.omega, false)?;
    mlp.siren_init(mix_seed(seed, 1), InitPosition::Input)?;
    let decoder = GroupDecoder::siren(cfg, anchors.to_vec(), seed)?;
    Ok(SieddModel {
        config: cfg.clone(),
        meta,
        encoder: SharedEncoder { mlp },
        groups: vec![decoder],
    })
}

/// Predictions of group `group_index` at the grid rows `coord_indices`.
pub fn forward_group(
    model: &SieddModel,
    group_index: usize,
    coord_indices: &[usize],
    grid: &CoordGrid,
) -> Result<Tensor2D> {
    if grid.patch() != model.config.patch {
        return Err(Error::Contract(format!(
            "grid patch {} differs from model patch {}",
            grid.patch(),
            model.config.patch
        )));
    }
    if let Some(&bad) = coord_indices.iter().find(|&&i| i >= grid.len()) {
        return Err(Error::Contract(format!("coordinate index {bad} outside grid of {}", grid.len())));
    }
    model.forward_coords(group_index, &grid.coords().gather_rows(coord_indices))
}

/// Contiguous partition of `n` frames into groups of `group_size` (last may be short).
pub fn group_ranges(n: usize, group_size: usize) -> Vec<Range<usize>> {
    if group_size == 0 {
        return Vec::new();
    }
    (0..n.div_ceil(group_size))
        .map(|g| g * group_size..((g + 1) * group_size).min(n))
        .collect()
}

/// Per-coordinate patch targets of a frame, `(H/p)(W/p) × 3p²`, ordered
/// `(dy, dx, channel)` inside each patch to match head outputs.
pub fn patch_targets(frame: &Frame, patch: usize) -> Result<Tensor2D> {
    let (h, w) = (frame.height(), frame.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("patch size {patch} does not divide {h}x{w}")));
    }
    let (cy, cx) = (h / patch, w / patch);
    let ch = 3 * patch * patch;
    let mut out = Tensor2D::zeros(cy * cx, ch);
    for r in 0..cy {
        for c in 0..cx {
            let row = out.row_mut(r * cx + c);
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = frame.pixel(r * patch + dy, c * patch + dx);
                    let k = (dy * patch + dx) * 3;
                    row[k..k + 3].copy_from_slice(&px);
                }
            }
        }
    }
    Ok(out)
}

/// Scatters grid-ordered patch predictions of the heads in `heads` into images.
///
/// `predictions` has one row per grid cell and `n_heads · 3p²` columns.
/// Values are copied raw; clamping is left to whoever materializes pixels.
pub fn assemble_frames(predictions: &Tensor2D, grid: &CoordGrid, heads: Range<usize>) -> Result<Vec<Frame>> {
    let p = grid.patch();
    let ch = 3 * p * p;
    if predictions.rows() != grid.len() {
        return Err(Error::Contract(format!(
            "{} prediction rows for a grid of {} cells",
            predictions.rows(),
            grid.len()
        )));
    }
    if predictions.cols() % ch != 0 || heads.end * ch > predictions.cols() {
        return Err(Error::Contract(format!(
            "prediction width {} does not cover heads {heads:?} of {ch} values",
            predictions.cols()
        )));
    }
    let (h, w, cx) = (grid.height(), grid.width(), grid.cells_x());
    let mut frames = Vec::with_capacity(heads.len());
    for head in heads {
        let mut data = vec![0.0f32; h * w * 3];
        for cell in 0..grid.len() {
            let (r, c) = (cell / cx, cell % cx);
            let src = &predictions.row(cell)[head * ch..(head + 1) * ch];
            for dy in 0..p {
                let y = r * p + dy;
                let dst = (y * w + c * p) * 3;
                data[dst..dst + 3 * p].copy_from_slice(&src[dy * p * 3..(dy + 1) * p * 3]);
            }
        }
        frames.push(Frame::new(h, w, data)?);
    }
    Ok(frames)
}

/// Stage-2 starting point for `frames`: the anchor trunk, and for each frame
/// the head of the nearest anchor frame (ties go to the earlier anchor).
pub fn init_group_from_anchor(anchor: &GroupDecoder, frames: Range<usize>) -> Result<GroupDecoder> {
    if anchor.n_heads() == 0 || anchor.frames.len() != anchor.n_heads() {
        return Err(Error::State("anchor decoder has not been trained on any frame".into()));
    }
    let heads = frames
        .clone()
        .map(|f| anchor.heads.heads()[nearest_anchor(&anchor.frames, f)].clone())
        .collect::<Vec<LinearLayer>>();
    Ok(GroupDecoder {
        frames: frames.collect(),
        trunk: anchor.trunk.clone(),
        heads: BatchLinearLayer::from_heads(heads)?,
    })
}

/// Position in `anchors` of the frame closest to `frame`; lower index wins ties.
pub fn nearest_anchor(anchors: &[usize], frame: usize) -> usize {
    let mut best = 0;
    for (k, &a) in anchors.iter().enumerate() {
        let d = a.abs_diff(frame);
        let bd = anchors[best].abs_diff(frame);
        if d < bd || (d == bd && a < anchors[best]) {
            best = k;
        }
    }
    best
}
