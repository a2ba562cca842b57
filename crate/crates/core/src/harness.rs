//! Model assembly, two-stage training and evaluation.

use std::path::Path;

use log::{debug, info};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::geometry::Camera;
use crate::heads::{
    decode_camera, frame, fuse, CameraHead, DenseHead, FutureHead, GaussianHead, GaussianSet, GaussianVars, HeadError, HeadsConfig,
};
use crate::losses::{
    loss_cam, loss_geo, loss_render, loss_temp, stage1_total, stage2_total, LossWeights, RenderBreakdown,
    RenderTargets, Stage1Components,
};
use crate::metrics::{
    accuracy_completeness, depth_metrics, image_metrics, normal_consistency, umeyama_align, MetricReport, MetricsError,
};
use crate::mta::{Mta, MtaConfig, MtaError};
use crate::numerics::container::{read_bundle, write_bundle, Bundle, ContainerError};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};
use crate::rasterizer::{render_var, RenderConfig};
use crate::synth::{read_clip, Clip, SynthError};

/// Stage-1 peak learning rate used with pretrained weights.
pub const FINETUNE_STAGE1_LR: f64 = 1e-6;
/// Stage-2 peak learning rate used with pretrained weights.
pub const FINETUNE_STAGE2_LR: f64 = 5e-5;
pub const FINETUNE_BATCH_IMAGES: usize = 18;
/// Warm-up length in epochs.
pub const FINETUNE_WARMUP_EPOCHS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mta(#[from] MtaError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("no clips given")]
    NoClips,
    #[error("clip does not match the model: {0}")]
    ClipShape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("model file: {0}")]
    ModelFile(String),
}

/// Flat training configuration; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    /// Optimizer steps; ignored when `epochs` is positive.
    pub steps: usize,
    /// Passes over the clip set; 0 means use `steps`.
    pub epochs: f64,
    pub peak_lr: f64,
    /// Fraction of `steps` spent in linear warm-up.
    pub warmup_fraction: f64,
    pub cosine: bool,
    /// Images per optimizer step; whole clips are packed until the budget
    /// is reached (at least one clip).
    pub batch_images: usize,
    pub delta_min: usize,
    pub delta_max: usize,
    pub seed: u64,
    pub lambda_temp: f64,
    pub lambda_gs: f64,
    pub lambda_dist: f64,
    pub lambda_flow: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Fraction of valid pixels carrying depth and point supervision in
    /// stage 2; 1 means dense.
    pub sparse_fraction: f64,
    pub log_every: usize,
    // model
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
    pub mta_layers: usize,
    pub motion_tokens: usize,
    pub rope: bool,
    pub channels: usize,
    pub upsample: usize,
    pub depth_scale: f64,
    pub point_scale: f64,
    pub velocity_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            stage: 1,
            steps: 2000,
            epochs: 0.0,
            peak_lr: 2e-3,
            warmup_fraction: 0.05,
            cosine: true,
            batch_images: FINETUNE_BATCH_IMAGES,
            delta_min: 1,
            delta_max: 3,
            seed: 0,
            lambda_temp: w.temp,
            lambda_gs: w.gs,
            lambda_dist: w.dist,
            lambda_flow: w.flow,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            sparse_fraction: 1.0,
            log_every: 100,
            height: 32,
            width: 32,
            patch: 4,
            dim: 32,
            encoder_depth: 2,
            heads: 4,
            mlp_ratio: 2,
            max_frames: 8,
            mta_layers: 2,
            motion_tokens: 4,
            rope: true,
            channels: 8,
            upsample: 0,
            depth_scale: 10.0,
            point_scale: 10.0,
            velocity_scale: 0.2,
        }
    }
}

impl TrainConfig {
    /// Reads a TOML or JSON document, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if !(1..=2).contains(&self.stage) {
            return bad("stage must be 1 or 2");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be nonnegative");
        }
        if self.delta_min == 0 || self.delta_min > self.delta_max {
            return bad("delta range must satisfy 1 <= delta_min <= delta_max");
        }
        if !(self.sparse_fraction > 0.0 && self.sparse_fraction <= 1.0) {
            return bad("sparse_fraction must lie in (0, 1]");
        }
        self.model_config().encoder.validate()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { temp: self.lambda_temp, gs: self.lambda_gs, dist: self.lambda_dist, flow: self.lambda_flow }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                height: self.height,
                width: self.width,
                patch: self.patch,
                dim: self.dim,
                depth: self.encoder_depth,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
                max_frames: self.max_frames,
                cross_view: true,
            },
            mta: MtaConfig {
                layers: self.mta_layers,
                motion_tokens: self.motion_tokens,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
                rope: self.rope,
                ..MtaConfig::default()
            },
            heads: HeadsConfig {
                channels: self.channels,
                upsample: self.upsample,
                depth_scale: self.depth_scale,
                point_scale: self.point_scale,
                velocity_scale: self.velocity_scale,
                ..HeadsConfig::default()
            },
        }
    }

    /// Clips visited per optimizer step.
    pub fn clips_per_step(&self, images_per_clip: usize, num_clips: usize) -> usize {
        (self.batch_images / images_per_clip.max(1)).clamp(1, num_clips.max(1))
    }

    pub fn total_steps(&self, images_per_clip: usize, num_clips: usize) -> usize {
        if self.epochs > 0.0 {
            let per_epoch = num_clips as f64 / self.clips_per_step(images_per_clip, num_clips) as f64;
            (self.epochs * per_epoch).ceil() as usize
        } else {
            self.steps
        }
    }

    /// Warm-up steps out of `total`, at least one when warm-up is enabled.
    pub fn warmup_steps(&self, total: usize) -> usize {
        if self.warmup_fraction == 0.0 {
            0
        } else {
            ((self.warmup_fraction * total as f64).round() as usize).max(1)
        }
    }
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then cosine decay
/// to 0 at `total` (or constant when `cosine` is false).
pub fn lr_schedule(step: usize, total: usize, warmup: usize, peak: f64, cosine: bool) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if !cosine || total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    (peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { beta1, beta2, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update; `grads[i]` of `None` counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = store.decays(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            let g = grads[k].as_ref().map(|g| g.data());
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (m.data()[i] / c1) / ((v.data()[i] / c2).sqrt() + self.eps);
                if decay {
                    p[i] -= lr * self.weight_decay * p[i];
                }
                p[i] -= lr * update;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mta: MtaConfig,
    pub heads: HeadsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        TrainConfig::default().model_config()
    }
}

/// The full network: patch encoder, motion-aware temporal attention,
/// camera, depth, point and future-point heads and the dynamic Gaussian head.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub mta: Mta,
    pub camera_head: CameraHead,
    pub depth_head: DenseHead,
    pub point_head: DenseHead,
    pub future_head: FutureHead,
    pub gaussian_head: GaussianHead,
}

/// Per-clip network outputs. Frames are flattened as `view * T + time`.
pub struct Prediction<'t> {
    /// `[V, T, 9]`.
    pub cameras: Var<'t>,
    /// `[V*T, H, W]` meters.
    pub depth: Var<'t>,
    /// `[V*T, 3, H, W]` world frame.
    pub points: Var<'t>,
    /// `[V*T, 3, H, W]`, `delta` steps later.
    pub future: Var<'t>,
    pub gaussians: Option<GaussianPrediction<'t>>,
}

pub struct GaussianPrediction<'t> {
    /// `[V*T, H, W]`.
    pub depth: Var<'t>,
    pub frames: Vec<GaussianVars<'t>>,
    /// Decoded (detached) cameras used for unprojection and rendering.
    pub cameras: Vec<Camera>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = &cfg.encoder;
        let (d, p) = (e.dim, e.patch);
        let encoder = Encoder::new(&mut store, e, &mut rng)?;
        let mta = Mta::new(&mut store, &cfg.mta, d, &mut rng);
        let h = &cfg.heads;
        let camera_head = CameraHead::new(&mut store, "camera_head", d, h, &mut rng);
        let depth_head = DenseHead::new(&mut store, "depth_head", d, p, h, 1, &mut rng)?;
        let point_head = DenseHead::new(&mut store, "point_head", d, p, h, 3, &mut rng)?;
        let future_head = FutureHead::new(&mut store, "future_head", d, p, h, &mut rng)?;
        let gaussian_head = GaussianHead::new(&mut store, "gaussian_head", d, p, cfg.mta.motion_tokens, h, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, encoder, mta, camera_head, depth_head, point_head, future_head, gaussian_head })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Runs the network on `images` `[V, T, 3, H, W]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        images: &Tensor,
        delta: f64,
        with_gaussians: bool,
    ) -> Result<Prediction<'t>, HarnessError> {
        let s = images.shape();
        let (nv, nt, h, w) = (s[0], s[1], s[3], s[4]);
        let nf = nv * nt;
        let e = &self.cfg.encoder;
        let grid = e.grid();
        let tokens = self.encoder.forward(p, tape, images)?;
        let mta = self.mta.forward(p, tape, &tokens.layers)?;
        let ta = mta.patches.reshape(&[nf, e.num_patches(), e.dim]);
        let hc = &self.cfg.heads;

        let cameras = self.camera_head.forward(p, tokens.camera);
        let depth = self.depth_head.forward(p, ta, grid)?.softplus().scale(hc.depth_scale).reshape(&[nf, h, w]);
        let points = self.point_head.forward(p, ta, grid)?.scale(hc.point_scale);
        let future = self.future_head.predict_future(p, ta, grid, points, delta)?;

        let gaussians = if with_gaussians {
            let gh = &self.gaussian_head;
            let feats = gh.gaussian_decode(p, ta, grid)?;
            let app = gh.appearance.appearance_features(p, tape.constant(images.reshape(&[nf, 3, h, w]).expect("same numel")));
            let fused = fuse(app, feats.features)?;
            let m = self.cfg.mta.motion_tokens;
            let bases = gh.velocity_bases(p, mta.motion.reshape(&[nf, m, e.dim]));
            let cam_values = cameras.value();
            let mut frames = Vec::with_capacity(nf);
            let mut cams = Vec::with_capacity(nf);
            for b in 0..nf {
                let cam = decode_camera(&cam_values.data()[9 * b..9 * b + 9], w, h, hc)?;
                let t = (b % nt) as f64;
                frames.push(gh.init_gaussians(p, frame(fused, b), frame(feats.depth, b), &cam, frame(bases, b), t)?);
                cams.push(cam);
            }
            Some(GaussianPrediction { depth: feats.depth, frames, cameras: cams })
        } else {
            None
        };
        Ok(Prediction { cameras, depth, points, future, gaussians })
    }

    /// Per-frame Gaussians predicted for `clip` with the camera each was
    /// unprojected with, in frame order.
    pub fn gaussian_sets(&self, clip: &Clip) -> Result<Vec<(GaussianSet, Camera)>, HarnessError> {
        let data = ClipTensors::new(clip);
        let tape = Tape::new();
        let p = self.store.bind_where(&tape, |_| false);
        let pred = self.forward(&p, &tape, &data.images, data.delta, true)?;
        let g = pred.gaussians.expect("requested");
        Ok(g.frames.iter().zip(g.cameras).map(|(f, c)| (f.to_set(), c)).collect())
    }

    /// Parameters and configuration as a bundle (records file plus JSON
    /// manifest).
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut b = Bundle::default();
        for (name, t) in self.store.named_tensors() {
            b.push_tensor(name, &t);
        }
        b.meta = serde_json::to_value(&self.cfg).map_err(|e| HarnessError::ModelFile(e.to_string()))?;
        write_bundle(path, &b)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let b = read_bundle(path)?;
        let cfg: ModelConfig = serde_json::from_value(b.meta.clone()).map_err(|e| HarnessError::ModelFile(e.to_string()))?;
        let mut model = Model::new(&cfg, 0)?;
        let named = b
            .entries
            .iter()
            .map(|(n, _)| Ok((n.clone(), b.tensor(n)?)))
            .collect::<Result<Vec<_>, ContainerError>>()?;
        model.store.load_named(&named).map_err(HarnessError::ModelFile)?;
        Ok(model)
    }
}

/// Ground truth of one clip laid out for the losses.
#[derive(Clone, Debug)]
pub struct ClipTensors {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub delta: f64,
    /// `[V, T, 3, H, W]`.
    pub images: Tensor,
    /// `[V*T, 3, H, W]`.
    pub images_flat: Tensor,
    /// `[V, T, 9]`.
    pub cameras: Tensor,
    /// `[V*T, 1, H, W]`.
    pub depth: Tensor,
    /// `[V*T, H, W]`.
    pub depth_flat: Tensor,
    pub points: Tensor,
    /// Scene flow `[V*T, 3, H, W]`, meters per frame step.
    pub flow_chw: Tensor,
    /// `[V*T, H, W]`.
    pub valid: Tensor,
    pub dynamic: Tensor,
    /// `[V*T, H*W, 3]`.
    pub flow: Tensor,
    /// `[V*T, H*W]`.
    pub valid_flat: Tensor,
}

impl ClipTensors {
    pub fn new(clip: &Clip) -> Self {
        let (nv, nt, h, w) = (clip.views, clip.frames, clip.height, clip.width);
        let nf = nv * nt;
        let hw = h * w;
        let delta = clip.delta as f64;
        let mask = |v: &[bool]| v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let mut images = Vec::with_capacity(nf * 3 * hw);
        let mut cameras = Vec::with_capacity(nf * 9);
        let (mut depth, mut points, mut flow_chw, mut valid, mut dynamic, mut flow) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for f in &clip.data {
            images.extend_from_slice(f.image.data());
            cameras.extend_from_slice(&f.camera_params().0);
            depth.extend_from_slice(f.depth.data());
            points.extend_from_slice(f.points.data());
            flow_chw.extend_from_slice(f.flow.data());
            valid.extend(mask(&f.valid));
            dynamic.extend(mask(&f.dynamic));
            let fl = f.flow.data();
            for i in 0..hw {
                flow.extend([fl[i], fl[hw + i], fl[2 * hw + i]]);
            }
        }
        let t = |shape: &[usize], d: Vec<f64>| Tensor::new(shape, d).expect("clip tensors are consistent");
        let valid_t = t(&[nf, h, w], valid);
        Self {
            views: nv,
            frames: nt,
            height: h,
            width: w,
            delta,
            images_flat: t(&[nf, 3, h, w], images.clone()),
            images: t(&[nv, nt, 3, h, w], images),
            cameras: t(&[nv, nt, 9], cameras),
            depth: t(&[nf, 1, h, w], depth.clone()),
            depth_flat: t(&[nf, h, w], depth),
            points: t(&[nf, 3, h, w], points),
            flow_chw: t(&[nf, 3, h, w], flow_chw),
            valid_flat: valid_t.reshape(&[nf, hw]).expect("same numel"),
            valid: valid_t,
            dynamic: t(&[nf, h, w], dynamic),
            flow: t(&[nf, hw, 3], flow),
        }
    }

    /// Ground-truth points `delta` frames after each frame.
    pub fn future(&self, delta: f64) -> Tensor {
        self.points.zip_map(&self.flow_chw, |p, f| p + delta * f)
    }

    pub fn num_frames(&self) -> usize {
        self.views * self.frames
    }

    /// Valid pixels kept with probability `fraction` (deterministic in `seed`).
    pub fn sparse_mask(&self, fraction: f64, seed: u64) -> Tensor {
        if fraction >= 1.0 {
            return self.valid.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = self.valid.data().iter().map(|&v| if v > 0.5 && rng.gen::<f64>() < fraction { 1.0 } else { 0.0 }).collect();
        Tensor::new(self.valid.shape(), data).expect("same shape")
    }
}

/// Depth and point supervision masks `[V*T, H, W]` that `train_stage` uses
/// for each clip: all valid pixels in stage 1, a `sparse_fraction` subset in
/// stage 2.
pub fn supervision_masks(data: &[ClipTensors], cfg: &TrainConfig) -> Vec<Tensor> {
    data.iter()
        .enumerate()
        .map(|(i, d)| if cfg.stage == 2 { d.sparse_mask(cfg.sparse_fraction, cfg.seed ^ (i as u64 + 1)) } else { d.valid.clone() })
        .collect()
}

/// Loss values of one clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cam: f64,
    pub depth: f64,
    pub point_t: f64,
    pub point_fut: f64,
    pub temp: f64,
    pub stage1: f64,
    pub render: Option<RenderBreakdown>,
    pub total: f64,
}

/// Builds the training objective of `stage` for one clip. `sup_mask`
/// restricts depth and point supervision (`[V*T, H, W]`).
pub fn clip_objective<'t>(
    model: &Model,
    p: &Bound<'t>,
    tape: &'t Tape,
    data: &ClipTensors,
    stage: u8,
    weights: &LossWeights,
    sup_mask: &Tensor,
    delta: f64,
) -> Result<(Var<'t>, StepLosses), HarnessError> {
    let pred = model.forward(p, tape, &data.images, delta, stage == 2)?;
    let future = data.future(delta);
    let nf = data.num_frames();
    let (h, w) = (data.height, data.width);
    let comps = Stage1Components {
        cam: loss_cam(pred.cameras, &data.cameras).value,
        depth: loss_geo(pred.depth.reshape(&[nf, 1, h, w]), &data.depth, sup_mask).value,
        point_t: loss_geo(pred.points, &data.points, sup_mask).value,
        point_fut: loss_geo(pred.future, &future, sup_mask).value,
        temp: loss_temp(&data.points, &future, pred.points, pred.future, &[sup_mask]).value,
    };
    let s1 = stage1_total(&comps, weights);
    let mut losses = StepLosses {
        cam: comps.cam.item(),
        depth: comps.depth.item(),
        point_t: comps.point_t.item(),
        point_fut: comps.point_fut.item(),
        temp: comps.temp.item(),
        stage1: s1.item(),
        ..Default::default()
    };
    let total = match &pred.gaussians {
        Some(g) => {
            let rcfg = RenderConfig::default();
            let mut colors = Vec::with_capacity(nf);
            let mut depths = Vec::with_capacity(nf);
            let mut velocities = Vec::with_capacity(nf);
            for (b, gv) in g.frames.iter().enumerate() {
                let out = render_var(&gv.render_inputs(), &g.cameras[b], 0.0, &rcfg);
                colors.push(out.slice(0, 0, 3));
                depths.push(out.slice(0, 3, 1));
                velocities.push(gv.velocity.reshape(&[1, h * w, 3]));
            }
            let ones = Tensor::ones(&[nf, h, w]);
            let targets = RenderTargets {
                rendered: Var::concat(&colors, 0).reshape(&[nf, 3, h, w]),
                image: &data.images_flat,
                image_mask: &ones,
                rendered_depth: Var::concat(&depths, 0),
                depth_sup: &data.depth_flat,
                depth_sup_mask: sup_mask,
                gaussian_depth: g.depth,
                teacher_depth: pred.depth,
                distill_mask: &ones,
                velocity: Var::concat(&velocities, 0),
                flow: &data.flow,
                flow_mask: &data.valid_flat,
            };
            let (r, breakdown) = loss_render(&targets, weights);
            losses.render = Some(breakdown);
            stage2_total(s1, r)
        }
        None => s1,
    };
    losses.total = total.item();
    Ok((total, losses))
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub losses: StepLosses,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub steps: Vec<StepLog>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&StepLog> {
        self.steps.last()
    }
}

fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Trains `model` in place. Every step visits whole clips (as many as fit
/// in `batch_images`), averaging their gradients.
pub fn train_stage(model: &mut Model, clips: &[Clip], cfg: &TrainConfig) -> Result<TrainTrace, HarnessError> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(HarnessError::NoClips);
    }
    let e = &model.cfg.encoder;
    for c in clips {
        if c.height != e.height || c.width != e.width {
            return Err(HarnessError::ClipShape(format!("{}x{} vs {}x{}", c.height, c.width, e.height, e.width)));
        }
    }
    let data: Vec<ClipTensors> = clips.iter().map(ClipTensors::new).collect();
    let masks = supervision_masks(&data, cfg);
    let per_clip = data[0].num_frames();
    let clips_per_step = cfg.clips_per_step(per_clip, clips.len());
    let total = cfg.total_steps(per_clip, clips.len());
    let weights = cfg.weights();
    let mut opt = AdamW::new(&model.store, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let warmup = cfg.warmup_steps(total);
    let mut trace = TrainTrace::default();
    for step in 0..total {
        let mut batch = Vec::with_capacity(clips_per_step);
        while batch.len() < clips_per_step {
            if order.is_empty() {
                order = (0..clips.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let ci = order.pop().expect("refilled");
            batch.push((ci, rng.gen_range(cfg.delta_min..=cfg.delta_max) as f64));
        }
        let results: Vec<Result<(Vec<Option<Tensor>>, StepLosses), HarnessError>> = batch
            .par_iter()
            .map(|&(ci, delta)| {
                let tape = Tape::new();
                let p = model.store.bind(&tape);
                let (loss, parts) = clip_objective(model, &p, &tape, &data[ci], cfg.stage, &weights, &masks[ci], delta)?;
                let g = tape.backward(loss).expect("scalar loss");
                Ok((p.grads(&g), parts))
            })
            .collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; model.store.len()];
        let mut losses = Vec::with_capacity(batch.len());
        for r in results {
            let (g, parts) = r?;
            if !parts.total.is_finite() {
                return Err(HarnessError::NonFiniteLoss { step });
            }
            losses.push(parts);
            for (acc, gi) in grads.iter_mut().zip(g) {
                match (acc.as_mut(), gi) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mut scale = inv;
        if cfg.grad_clip > 0.0 {
            let norm = global_norm(&grads) * inv;
            if !norm.is_finite() {
                return Err(HarnessError::NonFiniteLoss { step });
            }
            if norm > cfg.grad_clip {
                scale *= cfg.grad_clip / norm;
            }
        }
        for g in grads.iter_mut().flatten() {
            *g = g.scale(scale);
        }
        let lr = lr_schedule(step, total, warmup, cfg.peak_lr, cfg.cosine);
        opt.step(&mut model.store, &grads, lr);
        let mean = mean_losses(&losses);
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == total) {
            info!(
                "stage {} step {step} lr {lr:.2e} loss {:.5} temp {:.5} point {:.5}{}",
                cfg.stage,
                mean.total,
                mean.temp,
                mean.point_t,
                mean.render.map(|r| format!(" rgb {:.5} flow {:.5}", r.rgb, r.flow)).unwrap_or_default()
            );
        }
        debug!("step {step}: {mean:?}");
        trace.steps.push(StepLog { step, lr, loss: mean.total, losses: mean });
    }
    Ok(trace)
}

fn mean_losses(l: &[StepLosses]) -> StepLosses {
    let n = l.len() as f64;
    let avg = |f: &dyn Fn(&StepLosses) -> f64| l.iter().map(f).sum::<f64>() / n;
    let render = l[0].render.map(|_| {
        let r = |f: &dyn Fn(&RenderBreakdown) -> f64| l.iter().filter_map(|x| x.render.as_ref()).map(f).sum::<f64>() / n;
        RenderBreakdown { rgb: r(&|x| x.rgb), gsdepth: r(&|x| x.gsdepth), distill: r(&|x| x.distill), flow: r(&|x| x.flow), total: r(&|x| x.total) }
    });
    StepLosses {
        cam: avg(&|x| x.cam),
        depth: avg(&|x| x.depth),
        point_t: avg(&|x| x.point_t),
        point_fut: avg(&|x| x.point_fut),
        temp: avg(&|x| x.temp),
        stage1: avg(&|x| x.stage1),
        render,
        total: avg(&|x| x.total),
    }
}

/// Extension of clip files written by [`write_clip_set`].
pub const CLIP_EXTENSION: &str = "dv4d";

/// Reads every `*.dv4d` clip in `dir`, in file-name order.
pub fn load_clips(dir: &Path) -> Result<Vec<Clip>, HarnessError> {
    let io = |e: std::io::Error| HarnessError::Io { path: dir.display().to_string(), message: e.to_string() };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == CLIP_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(read_clip(p)?)).collect()
}

/// Writes clips as `clip_0000.dv4d`, ... (plus manifests) into `dir`.
pub fn write_clip_set(clips: &[Clip], dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    for (i, c) in clips.iter().enumerate() {
        crate::synth::write_clip(c, &dir.join(format!("clip_{i:04}.{CLIP_EXTENSION}")))?;
    }
    Ok(())
}

/// Saves a `[3, H, W]` image in `[0, 1]` as an 8-bit PNG.
pub fn write_png(image: &Tensor, path: &Path) -> Result<(), HarnessError> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(HarnessError::ClipShape(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        *px = image::Rgb(std::array::from_fn(|c| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    buf.save(path).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Evaluation of one clip plus the set mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipReport>,
    pub mean: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub seed: u64,
    pub metrics: MetricReport,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_json()).map_err(|e| HarnessError::ModelFile(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Similarity-align predicted points to ground truth before the
    /// accuracy, completeness and normal metrics.
    pub align: bool,
    pub median_scale_depth: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { align: true, median_scale_depth: true }
    }
}

fn vectors(points: &[f64], hw: usize, frame: usize, keep: &[bool]) -> Vec<Vector3<f64>> {
    let base = frame * 3 * hw;
    (0..hw)
        .filter(|&i| keep[i])
        .map(|i| Vector3::new(points[base + i], points[base + hw + i], points[base + 2 * hw + i]))
        .collect()
}

/// Evaluates `model` on every clip (in parallel across clips).
pub fn evaluate(model: &Model, clips: &[Clip], opts: &EvalOptions) -> Result<EvalReport, HarnessError> {
    if clips.is_empty() {
        return Err(HarnessError::NoClips);
    }
    let reports = clips
        .par_iter()
        .map(|c| evaluate_clip(model, c, opts).map(|metrics| ClipReport { seed: c.seed, metrics }))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = MetricReport::mean(&reports.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>()).expect("non-empty");
    Ok(EvalReport { clips: reports, mean })
}

/// Metrics of one clip. Predicted cameras drive both unprojection and
/// rendering.
pub fn evaluate_clip(model: &Model, clip: &Clip, opts: &EvalOptions) -> Result<MetricReport, HarnessError> {
    let e = &model.cfg.encoder;
    if clip.height != e.height || clip.width != e.width {
        return Err(HarnessError::ClipShape(format!("{}x{} vs {}x{}", clip.height, clip.width, e.height, e.width)));
    }
    let data = ClipTensors::new(clip);
    let (h, w, nt) = (data.height, data.width, data.frames);
    let hw = h * w;
    let nf = data.num_frames();
    let tape = Tape::new();
    let p = model.store.bind_where(&tape, |_| false);
    let pred = model.forward(&p, &tape, &data.images, data.delta, true)?;
    let g = pred.gaussians.as_ref().expect("requested");
    let rcfg = RenderConfig::default();

    let pts = pred.points.value();
    let gt_pts = data.points.data();
    let mut pred_cloud = Vec::new();
    let mut gt_cloud = Vec::new();
    for f in 0..nf {
        let keep: Vec<bool> = data.valid.data()[f * hw..(f + 1) * hw].iter().map(|&v| v > 0.5).collect();
        pred_cloud.extend(vectors(pts.data(), hw, f, &keep));
        gt_cloud.extend(vectors(gt_pts, hw, f, &keep));
    }
    let point_l1 =
        pred_cloud.iter().zip(&gt_cloud).map(|(a, b)| (a - b).abs().sum()).sum::<f64>() / pred_cloud.len().max(1) as f64;
    let aligned: Vec<Vector3<f64>> = if opts.align {
        let sim = umeyama_align(&pred_cloud, &gt_cloud, true)?;
        pred_cloud.iter().map(|q| sim.apply(q)).collect()
    } else {
        pred_cloud
    };
    let ac = accuracy_completeness(&aligned, &gt_cloud)?;
    let (nc_mean, nc_median) = normal_consistency(&aligned, &gt_cloud, None, None)?;

    let depth = pred.depth.value();
    let (mut abs_rel, mut delta_125, mut counted) = (0.0, 0.0, 0);
    for f in 0..nf {
        let r = |t: &Tensor| Tensor::new(&[h, w], t.data()[f * hw..(f + 1) * hw].to_vec()).expect("frame");
        match depth_metrics(&r(&depth), &r(&data.depth_flat), &r(&data.valid), opts.median_scale_depth) {
            Ok(m) => {
                abs_rel += m.abs_rel;
                delta_125 += m.delta_125;
                counted += 1;
            }
            Err(MetricsError::EmptyMask) => {}
            Err(err) => return Err(err.into()),
        }
    }
    let counted = counted.max(1) as f64;

    let sets: Vec<_> = g.frames.iter().map(|f| f.to_set()).collect();
    let (mut psnr, mut ssim) = (0.0, 0.0);
    let (mut dyn_psnr, mut dyn_ssim) = (Vec::new(), Vec::new());
    let (mut adv, mut stat) = (Vec::new(), Vec::new());
    let gt_image = |f: usize| data.images_flat.index_axis0(f);
    let dyn_mask = |f: usize| {
        let m = data.dynamic.index_axis0(f);
        (m.sum() > 0.0).then_some(m)
    };
    for f in 0..nf {
        let out = crate::rasterizer::render(&sets[f], &g.cameras[f], sets[f].time, &rcfg);
        let m = image_metrics(&out.color, &gt_image(f), None)?;
        psnr += m.psnr;
        ssim += m.ssim;
        if let Some(mask) = dyn_mask(f) {
            let d = image_metrics(&out.color, &gt_image(f), Some(&mask))?;
            dyn_psnr.push(d.psnr);
            dyn_ssim.push(d.ssim);
        }
        if f % nt + 1 < nt {
            if let Some(mask) = dyn_mask(f + 1) {
                let target = gt_image(f + 1);
                let moved = crate::rasterizer::render(&sets[f], &g.cameras[f + 1], sets[f].time + 1.0, &rcfg);
                adv.push(image_metrics(&moved.color, &target, Some(&mask))?.psnr);
                let mut frozen = sets[f].clone();
                frozen.velocity = Tensor::zeros(frozen.velocity.shape());
                let still = crate::rasterizer::render(&frozen, &g.cameras[f + 1], frozen.time + 1.0, &rcfg);
                stat.push(image_metrics(&still.color, &target, Some(&mask))?.psnr);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let mut vel_err = 0.0;
    let mut vel_n = 0usize;
    for (f, gv) in g.frames.iter().enumerate() {
        let nu = gv.velocity.value();
        for i in 0..hw {
            if data.valid_flat.data()[f * hw + i] > 0.5 {
                let a = Vector3::from_column_slice(&nu.data()[3 * i..3 * i + 3]);
                let b = Vector3::from_column_slice(&data.flow.data()[(f * hw + i) * 3..(f * hw + i) * 3 + 3]);
                vel_err += (a - b).norm();
                vel_n += 1;
            }
        }
    }
    Ok(MetricReport {
        acc_mean: ac.acc_mean,
        acc_median: ac.acc_median,
        comp_mean: ac.comp_mean,
        comp_median: ac.comp_median,
        nc_mean,
        nc_median,
        abs_rel: abs_rel / counted,
        delta_125: delta_125 / counted,
        psnr: psnr / nf as f64,
        ssim: ssim / nf as f64,
        dynamic_psnr: mean(&dyn_psnr),
        dynamic_ssim: mean(&dyn_ssim),
        advected_dynamic_psnr: mean(&adv),
        static_dynamic_psnr: mean(&stat),
        velocity_error: (vel_n > 0).then(|| vel_err / vel_n as f64),
        point_l1,
    })
}

/// Loss values of `clip` at its own offset with dense supervision, without
/// updating anything.
pub fn clip_losses(model: &Model, clip: &Clip, stage: u8, weights: &LossWeights) -> Result<StepLosses, HarnessError> {
    let data = ClipTensors::new(clip);
    let tape = Tape::new();
    let p = model.store.bind_where(&tape, |_| false);
    let (_, parts) = clip_objective(model, &p, &tape, &data, stage, weights, &data.valid, data.delta)?;
    Ok(parts)
}
