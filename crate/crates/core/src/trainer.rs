//! Two-stage training.
//!
//! Stage 1 fits the shared encoder together with one decoder whose heads
//! predict the anchor frames. Stage 2 freezes the encoder and fits one
//! decoder per contiguous frame group, each on its own worker, each seeded
//! only by `(seed, group index)`.

use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::coords::{default_sample_count, CoordGrid, EpochSampler};
use crate::error::{Error, Result};
use crate::model::{group_ranges, init_group_from_anchor, mix_seed, patch_targets, GroupDecoder, SharedEncoder, SieddModel};
use crate::nn::{BatchLinearLayer, GradTape, Mlp, MlpGrads, Parameters};
use crate::optim::{SfAdamW, SfAdamWConfig};
use crate::tensor::Tensor2D;
use crate::video::VideoFrames;

/// Per-iteration mean squared error.
pub type LossTrace = Vec<f64>;

/// Encoder latents are precomputed for the whole grid in stage 2 when they
/// fit in this many floats.
const LATENT_CACHE_LIMIT: usize = 1 << 27;

const STAGE1_STREAM: u64 = 0x5174_6731;
const STAGE2_STREAM: u64 = 0x5174_6732;
const RANDOM_INIT_STREAM: u64 = 0x5174_6733;

/// How many coordinates each minibatch draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    /// `max(1, ⌊cells/1024⌋)`.
    Default,
    /// A fraction of all grid cells, at least one.
    Rate(f64),
    /// A fixed count (clamped to the number of cells).
    Count(usize),
    /// Every cell in every step.
    Full,
}

impl Sampling {
    pub fn batch_size(&self, grid: &CoordGrid) -> usize {
        let cells = grid.len();
        match *self {
            Sampling::Default => default_sample_count(grid.cells_y(), grid.cells_x()),
            Sampling::Rate(r) => ((cells as f64 * r).round() as usize).clamp(1, cells),
            Sampling::Count(c) => c.clamp(1, cells),
            Sampling::Full => cells,
        }
    }
}

/// How stage-2 decoders are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupInit {
    /// From the nearest anchor head and the stage-1 trunk.
    Anchor,
    /// Fresh sine initialization seeded by `(seed, group)`.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Frames per decoder group (`N_g`).
    pub group_size: usize,
    /// Anchor frames for stage 1 (`N_s`); `None` means `N_s = N_g`.
    pub anchors: Option<usize>,
    pub sampling: Sampling,
    pub stage1_iters: usize,
    /// Iterations per group.
    pub stage2_iters: usize,
    pub stage1_opt: SfAdamWConfig,
    pub stage2_opt: SfAdamWConfig,
    pub seed: u64,
    pub workers: usize,
    /// Progress line period in iterations; 0 disables.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 20,
            anchors: None,
            sampling: Sampling::Default,
            stage1_iters: 20_000,
            stage2_iters: 20_000,
            stage1_opt: SfAdamWConfig::default(),
            stage2_opt: SfAdamWConfig::default(),
            seed: 0,
            workers: 1,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings paired with the toy model preset.
    pub fn toy() -> Self {
        Self {
            group_size: 4,
            sampling: Sampling::Rate(1.0 / 16.0),
            stage1_iters: 2000,
            stage2_iters: 2000,
            stage2_opt: SfAdamWConfig {
                lr: 2e-4,
                ..SfAdamWConfig::default()
            },
            log_every: 500,
            ..Self::default()
        }
    }

    /// `N_s` for a video of `n` frames.
    pub fn anchor_count(&self, n: usize) -> Result<usize> {
        match self.anchors {
            Some(s) => Ok(s),
            None => Ok(self.group_size.min(n)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::config("group size must be positive"));
        }
        if self.workers == 0 {
            return Err(Error::config("at least one worker is required"));
        }
        if let Sampling::Rate(r) = self.sampling {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("sampling rate {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Uniformly spaced anchors `⌊k·N/N_s⌋`, `k = 0..N_s`.
pub fn select_anchors(n: usize, n_s: usize) -> Result<Vec<usize>> {
    if n_s == 0 || n_s > n {
        return Err(Error::config(format!("cannot pick {n_s} anchors from {n} frames")));
    }
    Ok((0..n_s).map(|k| k * n / n_s).collect())
}

/// Mean squared error and its gradient `2(pred − target)/n`.
pub fn l2_loss(pred: &Tensor2D, target: &Tensor2D) -> Result<(f64, Tensor2D)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1);
    let scale = 2.0 / n as f32;
    let mut grad = Tensor2D::zeros(pred.rows(), pred.cols());
    let mut sum = 0.0f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let r = p - t;
        sum += (p as f64 - t as f64).powi(2);
        *g = scale * r;
    }
    Ok((sum / n as f64, grad))
}

/// Targets of the listed frames gathered at `indices`, laid out like head output.
fn gather_targets(targets: &[Tensor2D], indices: &[usize]) -> Tensor2D {
    let ch = targets.first().map_or(0, |t| t.cols());
    let width = ch * targets.len();
    let mut out = Tensor2D::zeros(indices.len(), width);
    for (r, &i) in indices.iter().enumerate() {
        let row = out.row_mut(r);
        for (h, t) in targets.iter().enumerate() {
            row[h * ch..(h + 1) * ch].copy_from_slice(t.row(i));
        }
    }
    out
}

fn frame_targets(video: &VideoFrames, frames: &[usize], patch: usize) -> Result<Vec<Tensor2D>> {
    frames
        .iter()
        .map(|&f| {
            let frame = video
                .frames
                .get(f)
                .ok_or_else(|| Error::Contract(format!("frame {f} outside video of {}", video.len())))?;
            patch_targets(frame, patch)
        })
        .collect()
}

fn training_grid(model: &SieddModel, video: &VideoFrames) -> Result<CoordGrid> {
    if (video.height(), video.width()) != (model.meta.height, model.meta.width) {
        return Err(Error::shape(format!(
            "video is {}x{}, model was built for {}x{}",
            video.height(),
            video.width(),
            model.meta.height,
            model.meta.width
        )));
    }
    CoordGrid::new(model.meta.height, model.meta.width, model.config.patch)
}

fn check_loss(loss: f64, stage: u8, group: usize, iter: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            stage,
            group,
            iter,
            msg: format!("loss became {loss}"),
        })
    }
}

fn full_backward(
    encoder: &Mlp,
    decoder: &GroupDecoder,
    features: &Tensor2D,
    target: &Tensor2D,
    enc_tape: &mut GradTape,
    trunk_tape: &mut GradTape,
) -> Result<(f64, MlpGrads, MlpGrads, BatchLinearLayer)> {
    let latent = encoder.forward(features, Some(enc_tape))?;
    let hidden = decoder.trunk.forward(&latent, Some(trunk_tape))?;
    let pred = decoder.heads.forward(&hidden)?;
    let (loss, d_pred) = l2_loss(&pred, target)?;
    let (g_heads, d_hidden) = decoder.heads.backward(&hidden, &d_pred, true)?;
    let (g_trunk, d_latent) = decoder.trunk.backward(trunk_tape, &d_hidden.expect("requested"), true)?;
    let (g_enc, _) = encoder.backward(enc_tape, &d_latent.expect("requested"), false)?;
    Ok((loss, g_enc, g_trunk, g_heads))
}

/// L2 loss of `encoder → decoder` on one batch of positional features and
/// the gradient of every parameter, encoder tensors first, then decoder
/// tensors, each in [`Parameters`] order.
pub fn network_gradients(
    encoder: &Mlp,
    decoder: &GroupDecoder,
    features: &Tensor2D,
    target: &Tensor2D,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let (loss, g_enc, g_trunk, g_heads) = full_backward(
        encoder,
        decoder,
        features,
        target,
        &mut GradTape::new(),
        &mut GradTape::new(),
    )?;
    let grads = g_enc
        .param_slices()
        .into_iter()
        .chain(g_trunk.param_slices())
        .chain(g_heads.param_slices())
        .map(|s| s.to_vec())
        .collect();
    Ok((loss, grads))
}

/// Fits the encoder and the anchor decoder (`model.groups[0]`) to the anchor
/// frames, all anchors sharing each coordinate batch.
pub fn train_stage1(model: &mut SieddModel, video: &VideoFrames, cfg: &TrainConfig) -> Result<LossTrace> {
    cfg.validate()?;
    if model.groups.len() != 1 {
        return Err(Error::State(format!(
            "stage 1 expects exactly one anchor decoder, found {}",
            model.groups.len()
        )));
    }
    let grid = training_grid(model, video)?;
    let pe = model.config.pos_encoding;
    let anchor_frames = model.groups[0].frames.clone();
    let targets = frame_targets(video, &anchor_frames, model.config.patch)?;
    let mut sampler = EpochSampler::new(grid.len(), cfg.sampling.batch_size(&grid), mix_seed(cfg.seed, STAGE1_STREAM))?;

    let SieddModel { encoder, groups, .. } = model;
    let decoder = &mut groups[0];
    let mut opt = {
        let mut init = encoder.mlp.param_slices();
        init.extend(decoder.param_slices());
        SfAdamW::new(cfg.stage1_opt, &init)
    };
    let mut trace = Vec::with_capacity(cfg.stage1_iters);
    let (mut enc_tape, mut trunk_tape) = (GradTape::new(), GradTape::new());
    for iter in 0..cfg.stage1_iters {
        let idx = sampler.next_batch();
        let features = pe.encode(&grid.coords().gather_rows(idx))?;
        let target = gather_targets(&targets, idx);
        let (loss, g_enc, g_trunk, g_heads) =
            full_backward(&encoder.mlp, decoder, &features, &target, &mut enc_tape, &mut trunk_tape)?;
        check_loss(loss, 1, 0, iter)?;
        trace.push(loss);
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            log::info!("stage=1 group=0 iter={iter} loss={loss:.6e}");
        }

        let mut grads = g_enc.param_slices();
        grads.extend(g_trunk.param_slices());
        grads.extend(g_heads.param_slices());
        let mut params = encoder.mlp.param_slices_mut();
        params.extend(decoder.param_slices_mut());
        opt.step(&mut params, &grads).map_err(|e| Error::Training {
            stage: 1,
            group: 0,
            iter,
            msg: e.to_string(),
        })?;
    }
    let mut params = encoder.mlp.param_slices_mut();
    params.extend(decoder.param_slices_mut());
    opt.write_average(&mut params);
    Ok(trace)
}

/// Read-only state shared by every stage-2 worker.
pub struct Stage2Context<'a> {
    pub encoder: &'a SharedEncoder,
    pub grid: CoordGrid,
    pe: crate::coords::PosEncoding,
    latents: Option<Tensor2D>,
}

impl<'a> Stage2Context<'a> {
    /// Builds the context, precomputing latents for the full grid when they fit.
    pub fn new(model: &'a SieddModel, grid: CoordGrid) -> Result<Self> {
        let pe = model.config.pos_encoding;
        let latents = if grid.len() * model.config.dim <= LATENT_CACHE_LIMIT {
            let features = pe.encode(grid.coords())?;
            Some(model.encoder.forward(&features)?)
        } else {
            None
        };
        Ok(Self {
            encoder: &model.encoder,
            grid,
            pe,
            latents,
        })
    }

    /// Encoder output at the given grid rows.
    pub fn latents(&self, idx: &[usize]) -> Result<Tensor2D> {
        match &self.latents {
            Some(cache) => Ok(cache.gather_rows(idx)),
            None => {
                let features = self.pe.encode(&self.grid.coords().gather_rows(idx))?;
                self.encoder.forward(&features)
            }
        }
    }

    pub fn has_latent_cache(&self) -> bool {
        self.latents.is_some()
    }
}

/// Called every `every` iterations with the current averaged decoder; return
/// `false` to stop training early.
pub struct Probe<'p> {
    pub every: usize,
    pub f: &'p mut dyn FnMut(usize, &GroupDecoder) -> bool,
}

/// Trains one group's decoder against the frozen encoder.
pub fn train_stage2_group(
    ctx: &Stage2Context<'_>,
    video: &VideoFrames,
    decoder: GroupDecoder,
    cfg: &TrainConfig,
    group_index: usize,
) -> Result<(GroupDecoder, LossTrace)> {
    train_stage2_group_probed(ctx, video, decoder, cfg, group_index, None)
}

pub fn train_stage2_group_probed(
    ctx: &Stage2Context<'_>,
    video: &VideoFrames,
    mut decoder: GroupDecoder,
    cfg: &TrainConfig,
    group_index: usize,
    mut probe: Option<Probe<'_>>,
) -> Result<(GroupDecoder, LossTrace)> {
    let targets = frame_targets(video, &decoder.frames, ctx.grid.patch())?;
    let mut sampler = EpochSampler::new(
        ctx.grid.len(),
        cfg.sampling.batch_size(&ctx.grid),
        mix_seed(cfg.seed, STAGE2_STREAM ^ ((group_index as u64) << 20)),
    )?;
    let mut opt = SfAdamW::new(cfg.stage2_opt, &decoder.param_slices());
    let mut trace = Vec::with_capacity(cfg.stage2_iters);
    let mut tape = GradTape::new();
    for iter in 0..cfg.stage2_iters {
        if let Some(p) = probe.as_mut() {
            if p.every > 0 && iter % p.every == 0 && !probe_average(&opt, &decoder, iter, p) {
                break;
            }
        }
        let idx = sampler.next_batch();
        let latent = ctx.latents(idx)?;
        let hidden = decoder.trunk.forward(&latent, Some(&mut tape))?;
        let pred = decoder.heads.forward(&hidden)?;
        let (loss, d_pred) = l2_loss(&pred, &gather_targets(&targets, idx))?;
        check_loss(loss, 2, group_index, iter)?;
        trace.push(loss);
        if cfg.log_every > 0 && iter % cfg.log_every == 0 {
            log::info!("stage=2 group={group_index} iter={iter} loss={loss:.6e}");
        }
        let (g_heads, d_hidden) = decoder.heads.backward(&hidden, &d_pred, true)?;
        let (g_trunk, _) = decoder.trunk.backward(&tape, &d_hidden.expect("requested"), false)?;
        let mut grads = g_trunk.param_slices();
        grads.extend(g_heads.param_slices());
        opt.step(&mut decoder.param_slices_mut(), &grads)
            .map_err(|e| Error::Training {
                stage: 2,
                group: group_index,
                iter,
                msg: e.to_string(),
            })?;
    }
    opt.write_average(&mut decoder.param_slices_mut());
    if let Some(p) = probe.as_mut() {
        if p.every > 0 && trace.len() == cfg.stage2_iters {
            (p.f)(cfg.stage2_iters, &decoder);
        }
    }
    Ok((decoder, trace))
}

fn probe_average(opt: &SfAdamW, decoder: &GroupDecoder, iter: usize, probe: &mut Probe<'_>) -> bool {
    let mut snapshot = decoder.clone();
    opt.write_average(&mut snapshot.param_slices_mut());
    (probe.f)(iter, &snapshot)
}

/// Trains every group of a stage-1 model on `cfg.workers` threads and
/// replaces the anchor decoder with the per-group decoders.
pub fn train_all_groups(model: &mut SieddModel, video: &VideoFrames, cfg: &TrainConfig) -> Result<Vec<LossTrace>> {
    train_groups_with(model, video, cfg, GroupInit::Anchor)
}

pub fn train_groups_with(
    model: &mut SieddModel,
    video: &VideoFrames,
    cfg: &TrainConfig,
    init: GroupInit,
) -> Result<Vec<LossTrace>> {
    cfg.validate()?;
    let grid = training_grid(model, video)?;
    let ranges = group_ranges(video.len(), cfg.group_size);
    let inits: Vec<GroupDecoder> = match init {
        GroupInit::Anchor => {
            let anchor = model
                .groups
                .first()
                .ok_or_else(|| Error::State("stage 1 has not produced an anchor decoder".into()))?;
            ranges
                .iter()
                .map(|r| init_group_from_anchor(anchor, r.clone()))
                .collect::<Result<_>>()?
        }
        GroupInit::Random => ranges
            .iter()
            .enumerate()
            .map(|(g, r)| random_group_init(model, r.clone(), cfg.seed, g))
            .collect::<Result<_>>()?,
    };

    let results = {
        let ctx = Stage2Context::new(model, grid)?;
        run_pool(inits, cfg.workers, |g, init| train_stage2_group(&ctx, video, init, cfg, g))?
    };
    let (groups, traces) = results.into_iter().unzip();
    model.groups = groups;
    Ok(traces)
}

/// Freshly initialized decoder for `frames`, seeded by `(seed, group)`.
pub fn random_group_init(model: &SieddModel, frames: Range<usize>, seed: u64, group: usize) -> Result<GroupDecoder> {
    GroupDecoder::siren(
        &model.config,
        frames.collect(),
        mix_seed(seed, RANDOM_INIT_STREAM ^ ((group as u64) << 20)),
    )
}

/// Runs `job(index, input)` for every input on up to `workers` threads and
/// returns outputs in input order. A panicking job is reported with its index.
pub fn run_pool<I, O, F>(inputs: Vec<I>, workers: usize, job: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(usize, I) -> Result<O> + Sync,
{
    let n = inputs.len();
    let slots: Vec<Mutex<Option<I>>> = inputs.into_iter().map(|i| Mutex::new(Some(i))).collect();
    let outputs: Vec<Mutex<Option<Result<O>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        if k >= n {
            break;
        }
        let input = slots[k].lock().expect("slot lock").take().expect("each job runs once");
        let out = catch_unwind(AssertUnwindSafe(|| job(k, input))).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Err(Error::Worker { group: k, msg })
        });
        *outputs[k].lock().expect("output lock") = Some(out);
    };
    let threads = workers.clamp(1, n.max(1));
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    outputs
        .into_iter()
        .map(|o| o.into_inner().expect("output lock").expect("every job ran"))
        .collect()
}
