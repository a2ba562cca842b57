//! Decoders from temporal features to point maps and Gaussian primitives.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{camera_decode, Camera, CameraParams, GeometryError};
use crate::numerics::container::{Bundle, ContainerError};
use crate::numerics::{sigmoid, Bound, Linear, Mlp, Norm, ParamId, ParamStore, Tensor, Var};
use crate::rasterizer::RenderInputs;

/// Bounds on `ln(scale)` so that scales stay within `(1e-6, 1e3)` meters.
pub const LOG_SCALE_MIN: f64 = -13.8;
pub const LOG_SCALE_MAX: f64 = 6.9;

/// Gaussian primitives instantiated at time `time`.
///
/// Centers at time `time + offset` are `mu + offset * velocity`; keeping
/// `mu` fixed makes repeated advection compose exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    /// `[N, 3]` meters.
    pub mu: Tensor,
    /// `[N, 3]` log meters.
    pub log_scale: Tensor,
    /// `[N, 4]` unit quaternions `(w, x, y, z)`.
    pub quat: Tensor,
    /// `[N, 3]`, color is `sigmoid(color_logit)`.
    pub color_logit: Tensor,
    /// `[N]`, opacity is `sigmoid(opacity_logit)`.
    pub opacity_logit: Tensor,
    /// `[N, 3]` meters per frame step.
    pub velocity: Tensor,
    pub time: f64,
    pub offset: f64,
}

impl GaussianSet {
    pub fn empty(time: f64) -> Self {
        Self {
            mu: Tensor::zeros(&[0, 3]),
            log_scale: Tensor::zeros(&[0, 3]),
            quat: Tensor::zeros(&[0, 4]),
            color_logit: Tensor::zeros(&[0, 3]),
            opacity_logit: Tensor::zeros(&[0]),
            velocity: Tensor::zeros(&[0, 3]),
            time,
            offset: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current time of the set: `time + offset`.
    pub fn current_time(&self) -> f64 {
        self.time + self.offset
    }

    /// Constant-velocity motion by `delta` frame steps.
    pub fn advect(&self, delta: f64) -> GaussianSet {
        GaussianSet { offset: self.offset + delta, ..self.clone() }
    }

    /// Centers at the current time.
    pub fn centers(&self) -> Tensor {
        let off = self.offset;
        self.mu.zip_map(&self.velocity, |m, v| m + off * v)
    }

    pub fn center(&self, i: usize) -> Vector3<f64> {
        let c = self.mu.data();
        let v = self.velocity.data();
        Vector3::new(
            c[3 * i] + self.offset * v[3 * i],
            c[3 * i + 1] + self.offset * v[3 * i + 1],
            c[3 * i + 2] + self.offset * v[3 * i + 2],
        )
    }

    pub fn colors(&self) -> Tensor {
        self.color_logit.map(sigmoid)
    }

    pub fn opacities(&self) -> Tensor {
        self.opacity_logit.map(sigmoid)
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::default();
        b.push_tensor("mu", &self.mu);
        b.push_tensor("log_scale", &self.log_scale);
        b.push_tensor("quat", &self.quat);
        b.push_tensor("color_logit", &self.color_logit);
        b.push_tensor("opacity_logit", &self.opacity_logit);
        b.push_tensor("velocity", &self.velocity);
        b.push_tensor("t", &Tensor::from_vec(vec![self.time, self.offset]));
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self, ContainerError> {
        let t = b.tensor("t")?;
        let (time, offset) = match t.data() {
            [time, offset] => (*time, *offset),
            [time] => (*time, 0.0),
            _ => return Err(ContainerError::Manifest("t must hold one or two values".into())),
        };
        let set = Self {
            mu: b.tensor("mu")?,
            log_scale: b.tensor("log_scale")?,
            quat: b.tensor("quat")?,
            color_logit: b.tensor("color_logit")?,
            opacity_logit: b.tensor("opacity_logit")?,
            velocity: b.tensor("velocity")?,
            time,
            offset,
        };
        let n = set.len();
        let ok = set.log_scale.shape() == [n, 3]
            && set.quat.shape() == [n, 4]
            && set.color_logit.shape() == [n, 3]
            && set.opacity_logit.shape() == [n]
            && set.velocity.shape() == [n, 3];
        if !ok {
            return Err(ContainerError::Manifest("gaussian field counts disagree".into()));
        }
        Ok(set)
    }
}

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    /// Hidden channels of every dense decoder and of the Gaussian features.
    pub channels: usize,
    /// Number of 2x upsampling stages after the per-patch projection.
    pub upsample: usize,
    /// Depth is `softplus(x) * depth_scale`, meters.
    pub depth_scale: f64,
    /// Point maps are `x * point_scale`, meters.
    pub point_scale: f64,
    /// Future displacement and velocity bases are `x * velocity_scale`,
    /// meters per frame step.
    pub velocity_scale: f64,
    /// Initial screen-space Gaussian standard deviation, pixels.
    pub init_pixel_sigma: f64,
    /// Field-of-view clamp applied when decoding predicted cameras.
    pub fov_range: (f64, f64),
    /// Initial field of view of the camera head.
    pub init_fov: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            upsample: 1,
            depth_scale: 10.0,
            point_scale: 10.0,
            velocity_scale: 0.2,
            init_pixel_sigma: 0.6,
            fov_range: (0.2, 2.6),
            init_fov: 1.0,
        }
    }
}

/// Number of per-pixel Gaussian attributes before the mixing logits:
/// scale (3), rotation (4), color (3), opacity (1).
pub const GAUSSIAN_ATTRS: usize = 11;

/// Token-to-pixel decoder: layer norm, per-patch linear projection, pixel
/// shuffle, bilinear 2x upsampling stages, GELU and a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct DenseHead {
    pub norm: Norm,
    pub proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub patch: usize,
    pub channels: usize,
    pub upsample: usize,
    pub out_channels: usize,
}

impl DenseHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        patch: usize,
        cfg: &HeadsConfig,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, HeadError> {
        let f = 1usize << cfg.upsample;
        if !patch.is_multiple_of(f) {
            return Err(HeadError::Shape(format!("patch {patch} not divisible by 2^{}", cfg.upsample)));
        }
        let r = patch / f;
        let c = cfg.channels;
        let std = 1.0 / ((9 * c) as f64).sqrt();
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), dim),
            proj: Linear::new(store, &format!("{name}.proj"), dim, c * r * r, 1.0, rng),
            conv_w: store.add_normal(format!("{name}.conv.weight"), &[out_channels, c, 3, 3], std, rng),
            conv_b: store.add_const(format!("{name}.conv.bias"), &[out_channels], 0.0),
            patch,
            channels: c,
            upsample: cfg.upsample,
            out_channels,
        })
    }

    /// Zeroes the final convolution so the head starts at its bias.
    pub fn zero_output(&self, store: &mut ParamStore) {
        store.get_mut(self.conv_w).data_mut().fill(0.0);
    }

    /// `tokens` `[B, gh * gw, D]` to `[B, out_channels, gh * patch, gw * patch]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, tokens: Var<'t>, grid: (usize, usize)) -> Result<Var<'t>, HeadError> {
        let s = tokens.shape();
        let (gh, gw) = grid;
        if s.len() != 3 || s[1] != gh * gw || s[2] != self.proj.d_in {
            return Err(HeadError::Shape(format!("dense head tokens {s:?} for grid {grid:?}")));
        }
        let b = s[0];
        let r = self.patch >> self.upsample;
        let c = self.channels;
        let x = self.proj.forward(p, self.norm.forward(p, tokens));
        let mut x = x
            .reshape(&[b, gh, gw, c, r, r])
            .permute(&[0, 3, 1, 4, 2, 5])
            .reshape(&[b, c, gh * r, gw * r]);
        for _ in 0..self.upsample {
            x = x.upsample2x();
        }
        Ok(x.gelu().conv2d(p[self.conv_w], p[self.conv_b]))
    }
}

/// Camera parameters `[quat wxyz | translation | fov_y, fov_x]` from the
/// camera token. The quaternion is normalized with `w >= 0`.
#[derive(Clone, Debug)]
pub struct CameraHead {
    pub mlp: Mlp,
}

impl CameraHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &HeadsConfig, rng: &mut impl Rng) -> Self {
        let mlp = Mlp::new(store, name, dim, dim, 9, rng);
        store.get_mut(mlp.fc2.weight).data_mut().iter_mut().for_each(|w| *w *= 0.1);
        let bias = store.get_mut(mlp.fc2.bias).data_mut();
        bias[0] = 1.0;
        bias[7] = cfg.init_fov;
        bias[8] = cfg.init_fov;
        Self { mlp }
    }

    /// `[..., D]` to `[..., 9]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, tokens: Var<'t>) -> Var<'t> {
        let raw = self.mlp.forward(p, tokens);
        let s = raw.shape();
        let last = s.len() - 1;
        let quat = raw.slice(last, 0, 4);
        let sign: Vec<f64> = quat
            .value()
            .data()
            .chunks(4)
            .flat_map(|q| [if q[0] < 0.0 { -1.0 } else { 1.0 }; 4])
            .collect();
        let quat = quat.normalize_last(1e-12).mul_const(&Tensor::new(&quat.shape(), sign).expect("sized"));
        Var::concat(&[quat, raw.slice(last, 4, 5)], last)
    }
}

/// Decodes a predicted camera vector with the field of view clamped.
pub fn decode_camera(g: &[f64], width: usize, height: usize, cfg: &HeadsConfig) -> Result<Camera, HeadError> {
    if g.len() != 9 {
        return Err(HeadError::Shape(format!("camera vector of length {}", g.len())));
    }
    let mut v = [0.0; 9];
    v.copy_from_slice(g);
    for f in &mut v[7..9] {
        *f = f.clamp(cfg.fov_range.0, cfg.fov_range.1);
    }
    let (k, e) = camera_decode(&CameraParams(v), width, height)?;
    Ok(Camera::new(k, e))
}

/// Future point head: `P_fut = P_t + delta * velocity_scale * head(TA)`.
#[derive(Clone, Debug)]
pub struct FutureHead {
    pub head: DenseHead,
    pub velocity_scale: f64,
}

impl FutureHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, patch: usize, cfg: &HeadsConfig, rng: &mut impl Rng) -> Result<Self, HeadError> {
        let head = DenseHead::new(store, name, dim, patch, cfg, 3, rng)?;
        head.zero_output(store);
        Ok(Self { head, velocity_scale: cfg.velocity_scale })
    }

    /// `points_t` `[B, 3, H, W]`; returns the point maps `delta` steps later.
    pub fn predict_future<'t>(
        &self,
        p: &Bound<'t>,
        ta: Var<'t>,
        grid: (usize, usize),
        points_t: Var<'t>,
        delta: f64,
    ) -> Result<Var<'t>, HeadError> {
        let disp = self.head.forward(p, ta, grid)?;
        if disp.shape() != points_t.shape() {
            return Err(HeadError::Shape(format!("future {:?} vs points {:?}", disp.shape(), points_t.shape())));
        }
        Ok(points_t.add(disp.scale(delta * self.velocity_scale)))
    }
}

/// Two 3x3 convolutions over the input image with a GELU between.
#[derive(Clone, Debug)]
pub struct AppearanceConv {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl AppearanceConv {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add_normal(format!("{name}.conv1.weight"), &[channels, 3, 3, 3], 1.0 / 27f64.sqrt(), rng),
            b1: store.add_const(format!("{name}.conv1.bias"), &[channels], 0.0),
            w2: store.add_normal(
                format!("{name}.conv2.weight"),
                &[channels, channels, 3, 3],
                1.0 / ((9 * channels) as f64).sqrt(),
                rng,
            ),
            b2: store.add_const(format!("{name}.conv2.bias"), &[channels], 0.0),
        }
    }

    /// `[B, 3, H, W]` to `[B, C, H, W]`.
    pub fn appearance_features<'t>(&self, p: &Bound<'t>, images: Var<'t>) -> Var<'t> {
        images.conv2d(p[self.w1], p[self.b1]).gelu().conv2d(p[self.w2], p[self.b2])
    }
}

/// `G = F_app + F_g`.
pub fn fuse<'t>(f_app: Var<'t>, f_g: Var<'t>) -> Result<Var<'t>, HeadError> {
    if f_app.shape() != f_g.shape() {
        return Err(HeadError::Shape(format!("fuse {:?} vs {:?}", f_app.shape(), f_g.shape())));
    }
    Ok(f_app.add(f_g))
}

/// Per-pixel convex mixture of velocity bases: `bases` `[M, 3]`,
/// `mix_logits` `[N, M]`, result `[N, 3]`.
pub fn decode_velocities<'t>(bases: Var<'t>, mix_logits: Var<'t>) -> Result<Var<'t>, HeadError> {
    let (bs, ms) = (bases.shape(), mix_logits.shape());
    if bs.len() != 2 || bs[1] != 3 || ms.len() != 2 || ms[1] != bs[0] {
        return Err(HeadError::Shape(format!("bases {bs:?}, mixing logits {ms:?}")));
    }
    let weights = mix_logits.softmax(1).map_err(|e| HeadError::Shape(e.to_string()))?;
    Ok(weights.matmul(bases))
}

/// Differentiable Gaussians of one frame, one per feature pixel.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars<'t> {
    /// `[N, 3]`.
    pub mu: Var<'t>,
    /// `[N, 3]`, clamped.
    pub log_scale: Var<'t>,
    /// `[N, 4]`, unit.
    pub quat: Var<'t>,
    /// `[N, 3]`.
    pub color_logit: Var<'t>,
    /// `[N]`.
    pub opacity_logit: Var<'t>,
    /// `[N, M]`.
    pub mix_logits: Var<'t>,
    /// `[N, 3]`.
    pub velocity: Var<'t>,
    pub time: f64,
}

impl<'t> GaussianVars<'t> {
    pub fn render_inputs(&self) -> RenderInputs<'t> {
        RenderInputs {
            mu: self.mu,
            log_scale: self.log_scale,
            quat: self.quat,
            color: self.color_logit.sigmoid(),
            opacity: self.opacity_logit.sigmoid(),
            velocity: self.velocity,
        }
    }

    /// Same inputs with velocities replaced by zeros.
    pub fn render_inputs_static(&self) -> RenderInputs<'t> {
        let zeros = self.mu.tape().constant(Tensor::zeros(&self.velocity.shape()));
        RenderInputs { velocity: zeros, ..self.render_inputs() }
    }

    pub fn to_set(&self) -> GaussianSet {
        let v = |x: Var<'t>| (*x.value()).clone();
        GaussianSet {
            mu: v(self.mu),
            log_scale: v(self.log_scale),
            quat: v(self.quat),
            color_logit: v(self.color_logit),
            opacity_logit: v(self.opacity_logit),
            velocity: v(self.velocity),
            time: self.time,
            offset: 0.0,
        }
    }
}

/// Dynamic Gaussian head: Gaussian features and depth from temporal tokens,
/// image features, the per-pixel attribute decoder and the velocity bases.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub dense: DenseHead,
    pub appearance: AppearanceConv,
    pub attrs: Linear,
    pub bases: Linear,
    pub motion_tokens: usize,
    pub cfg: HeadsConfig,
}

/// Outputs of [`GaussianHead::gaussian_decode`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianFeatures<'t> {
    /// `[B, C, H, W]`.
    pub features: Var<'t>,
    /// `[B, H, W]`, strictly positive.
    pub depth: Var<'t>,
}

impl GaussianHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        patch: usize,
        motion_tokens: usize,
        cfg: &HeadsConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, HeadError> {
        let c = cfg.channels;
        let dense = DenseHead::new(store, &format!("{name}.dense"), dim, patch, cfg, c + 1, rng)?;
        let appearance = AppearanceConv::new(store, &format!("{name}.appearance"), c, rng);
        let attrs = Linear::new(store, &format!("{name}.attrs"), c, GAUSSIAN_ATTRS + motion_tokens, 0.1, rng);
        let bias = store.get_mut(attrs.bias).data_mut();
        bias[0..3].fill(cfg.init_pixel_sigma.ln());
        bias[3] = 1.0;
        let bases = Linear::new(store, &format!("{name}.bases"), dim, 3, 1.0, rng);
        Ok(Self { dense, appearance, attrs, bases, motion_tokens, cfg: cfg.clone() })
    }

    /// `F_g, D_g` from temporal patch tokens `[B, N_p, D]`.
    pub fn gaussian_decode<'t>(&self, p: &Bound<'t>, ta: Var<'t>, grid: (usize, usize)) -> Result<GaussianFeatures<'t>, HeadError> {
        let out = self.dense.forward(p, ta, grid)?;
        let s = out.shape();
        let c = self.cfg.channels;
        let features = out.slice(1, 0, c);
        let depth = out.slice(1, c, 1).softplus().scale(self.cfg.depth_scale).reshape(&[s[0], s[2], s[3]]);
        Ok(GaussianFeatures { features, depth })
    }

    /// Velocity bases `[B, M, 3]` from final motion-token states `[B, M, D]`.
    pub fn velocity_bases<'t>(&self, p: &Bound<'t>, motion: Var<'t>) -> Var<'t> {
        self.bases.forward(p, motion).scale(self.cfg.velocity_scale)
    }

    /// One Gaussian per pixel of `fused` (`[C, H, W]`), centered at
    /// `unproject(depth, camera)`. `camera` is treated as a constant.
    pub fn init_gaussians<'t>(
        &self,
        p: &Bound<'t>,
        fused: Var<'t>,
        depth: Var<'t>,
        camera: &Camera,
        bases: Var<'t>,
        time: f64,
    ) -> Result<GaussianVars<'t>, HeadError> {
        let fs = fused.shape();
        if fs.len() != 3 || depth.shape() != [fs[1], fs[2]] {
            return Err(HeadError::Shape(format!("fused {fs:?}, depth {:?}", depth.shape())));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let k = &camera.intrinsics;
        if k.width != w || k.height != h {
            return Err(GeometryError::ResolutionMismatch { a: (k.height, k.width), b: (h, w) }.into());
        }
        let n = h * w;
        let tape = fused.tape();
        let m = self.motion_tokens;
        let x = self.attrs.forward(p, fused.reshape(&[c, n]).transpose_last2());

        let (rays, origins) = pixel_rays(camera);
        let d = depth.reshape(&[n, 1]);
        let d3 = d.matmul(tape.constant(Tensor::ones(&[1, 3])));
        let mu = d3.mul_const(&rays).add(tape.constant(origins));

        let footprint = d.scale(1.0 / k.fx.max(k.fy)).ln().matmul(tape.constant(Tensor::ones(&[1, 3])));
        let log_scale = x.slice(1, 0, 3).add(footprint).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
        let quat = x.slice(1, 3, 4).normalize_last(1e-12);
        let color_logit = x.slice(1, 7, 3);
        let opacity_logit = x.slice(1, 10, 1).reshape(&[n]);
        let mix_logits = x.slice(1, GAUSSIAN_ATTRS, m);
        let velocity = decode_velocities(bases, mix_logits)?;
        Ok(GaussianVars { mu, log_scale, quat, color_logit, opacity_logit, mix_logits, velocity, time })
    }
}

/// World-space ray directions (camera z = 1) and camera centers for every
/// pixel in row-major order, both `[H * W, 3]`.
pub fn pixel_rays(camera: &Camera) -> (Tensor, Tensor) {
    let (h, w) = (camera.intrinsics.height, camera.intrinsics.width);
    let o = camera.center();
    let mut rays = Vec::with_capacity(3 * h * w);
    let mut origins = Vec::with_capacity(3 * h * w);
    for row in 0..h {
        for col in 0..w {
            let r = camera.ray(col as f64, row as f64);
            rays.extend([r.x, r.y, r.z]);
            origins.extend([o.x, o.y, o.z]);
        }
    }
    (Tensor::new(&[h * w, 3], rays).expect("sized"), Tensor::new(&[h * w, 3], origins).expect("sized"))
}

/// Frame `b` of a batched tensor variable.
pub fn frame<'t>(x: Var<'t>, b: usize) -> Var<'t> {
    let s = x.shape();
    x.slice(0, b, 1).reshape(&s[1..])
}

/// Camera vector of frame `(v, t)` from `[V, T, 9]`.
pub fn camera_vector(cams: &Tensor, index: usize) -> &[f64] {
    &cams.data()[9 * index..9 * index + 9]
}
