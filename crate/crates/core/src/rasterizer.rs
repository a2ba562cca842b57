//! Differentiable CPU splatting of velocity-advected 3D Gaussians.
//!
//! Each Gaussian is moved to the render time, projected with the local affine
//! approximation of the pinhole map, and composited front to back over the
//! pixels inside its 3-sigma ellipse. Pixels are processed in 16x16 tiles in
//! parallel; every pixel is independent, so the result does not depend on
//! the number of threads. The backward pass replays each pixel, accumulates
//! per-tile gradients and merges them in tile order.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Z_NEAR};
use crate::heads::GaussianSet;
use crate::numerics::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub tile: usize,
    /// Added to the diagonal of every screen-space covariance, pixels^2.
    pub low_pass: f64,
    /// Compositing stops once transmittance drops below this.
    pub min_transmittance: f64,
    /// Splat support radius in standard deviations.
    pub sigma_cutoff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { background: [0.0; 3], tile: 16, low_pass: 0.3, min_transmittance: 1e-4, sigma_cutoff: 3.0 }
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub index: usize,
    pub mean: [f64; 2],
    /// Symmetric `[xx, xy, yy]`, low-pass floor included.
    pub cov: [f64; 3],
    /// Inverse of `cov`, `[a, b, c]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub radius: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Flat per-primitive arrays in render order of fields.
#[derive(Clone, Copy, Debug)]
pub struct Primitives<'a> {
    pub mu: &'a [f64],
    pub log_scale: &'a [f64],
    pub quat: &'a [f64],
    /// Activated colors in `[0, 1]`.
    pub color: &'a [f64],
    /// Activated opacities in `[0, 1]`.
    pub opacity: &'a [f64],
    pub velocity: &'a [f64],
    /// Frame steps to advect before projecting.
    pub delta: f64,
}

impl Primitives<'_> {
    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    fn v3(s: &[f64], i: usize) -> Vector3<f64> {
        Vector3::new(s[3 * i], s[3 * i + 1], s[3 * i + 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `[3, H, W]`.
    pub color: Tensor,
    /// `[H, W]`, alpha-weighted mean depth, 0 where nothing was hit.
    pub depth: Tensor,
    /// `[H, W]`.
    pub alpha: Tensor,
}

/// Gradients with respect to every primitive field and the camera
/// translation.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrads {
    pub mu: Vec<f64>,
    pub log_scale: Vec<f64>,
    pub quat: Vec<f64>,
    pub color: Vec<f64>,
    pub opacity: Vec<f64>,
    pub velocity: Vec<f64>,
    pub camera_translation: [f64; 3],
}

fn quat_matrix(q: &[f64]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn quat_matrix_grad(q: &[f64], g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gg = |r: usize, c: usize| g[(r, c)];
    [
        2.0 * (-z * gg(0, 1) + y * gg(0, 2) + z * gg(1, 0) - x * gg(1, 2) - y * gg(2, 0) + x * gg(2, 1)),
        2.0 * (y * gg(0, 1) + z * gg(0, 2) + y * gg(1, 0) - 2.0 * x * gg(1, 1) - w * gg(1, 2) + z * gg(2, 0) + w * gg(2, 1)
            - 2.0 * x * gg(2, 2)),
        2.0 * (-2.0 * y * gg(0, 0) + x * gg(0, 1) + w * gg(0, 2) + x * gg(1, 0) + z * gg(1, 2) - w * gg(2, 0)
            + z * gg(2, 1)
            - 2.0 * y * gg(2, 2)),
        2.0 * (-2.0 * z * gg(0, 0) - w * gg(0, 1) + x * gg(0, 2) + w * gg(1, 0) - 2.0 * z * gg(1, 1)
            + y * gg(1, 2)
            + x * gg(2, 0)
            + y * gg(2, 1)),
    ]
}

/// Intermediates of one projection, kept for the backward pass.
struct Projected {
    xc: Vector3<f64>,
    j: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
    m: Matrix3<f64>,
    rq: Matrix3<f64>,
    scale: Vector3<f64>,
    conic: Matrix2<f64>,
    splat: Splat2D,
}

fn project(prims: &Primitives, i: usize, camera: &Camera, cfg: &RenderConfig) -> Option<Projected> {
    let w = camera.extrinsics.rotation_matrix();
    let mu = Primitives::v3(prims.mu, i) + Primitives::v3(prims.velocity, i) * prims.delta;
    let xc = w * mu + camera.extrinsics.translation;
    if !(xc.z > Z_NEAR) {
        return None;
    }
    let k = &camera.intrinsics;
    let (x, y, z) = (xc.x, xc.y, xc.z);
    let j = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    let scale = Primitives::v3(prims.log_scale, i).map(f64::exp);
    let rq = quat_matrix(&prims.quat[4 * i..4 * i + 4]);
    let m = rq * Matrix3::from_diagonal(&scale);
    let cov_cam = w * (m * m.transpose()) * w.transpose();
    let cov2 = j * cov_cam * j.transpose() + Matrix2::identity() * cfg.low_pass;
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(0, 1)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(0, 1)], cov2[(0, 0)]) / det;
    let mid = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let lambda = mid + (mid * mid - det).max(0.0).sqrt();
    let splat = Splat2D {
        index: i,
        mean: [k.fx * x / z + k.cx, k.fy * y / z + k.cy],
        cov: [cov2[(0, 0)], cov2[(0, 1)], cov2[(1, 1)]],
        conic: [conic[(0, 0)], conic[(0, 1)], conic[(1, 1)]],
        depth: z,
        radius: cfg.sigma_cutoff * lambda.sqrt(),
        color: [prims.color[3 * i], prims.color[3 * i + 1], prims.color[3 * i + 2]],
        opacity: prims.opacity[i],
    };
    Some(Projected { xc, j, cov_cam, m, rq, scale, conic, splat })
}

/// Projects one primitive; `None` when culled behind the near plane.
pub fn project_splat(prims: &Primitives, i: usize, camera: &Camera, cfg: &RenderConfig) -> Option<Splat2D> {
    project(prims, i, camera, cfg).map(|p| p.splat)
}

struct Tile {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    splats: Vec<usize>,
}

struct Plan {
    splats: Vec<Splat2D>,
    tiles: Vec<Tile>,
    width: usize,
    height: usize,
}

fn plan(prims: &Primitives, camera: &Camera, cfg: &RenderConfig) -> Plan {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut splats: Vec<Splat2D> = (0..prims.len()).filter_map(|i| project_splat(prims, i, camera, cfg)).collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let ts = cfg.tile.max(1);
    let (tw, th) = (w.div_ceil(ts), h.div_ceil(ts));
    let mut tiles: Vec<Tile> = (0..th * tw)
        .map(|t| {
            let (ty, tx) = (t / tw, t % tw);
            Tile { x0: tx * ts, y0: ty * ts, x1: ((tx + 1) * ts).min(w), y1: ((ty + 1) * ts).min(h), splats: Vec::new() }
        })
        .collect();
    for (s_idx, s) in splats.iter().enumerate() {
        let (u, v, r) = (s.mean[0], s.mean[1], s.radius);
        if u + r < 0.0 || v + r < 0.0 || u - r > (w - 1) as f64 || v - r > (h - 1) as f64 {
            continue;
        }
        let lo = |c: f64| (c.max(0.0).ceil() as usize) / ts;
        let hi = |c: f64, n: usize| ((c.floor().max(0.0) as usize).min(n - 1)) / ts;
        for ty in lo(v - r)..=hi(v + r, h) {
            for tx in lo(u - r)..=hi(u + r, w) {
                tiles[ty * tw + tx].splats.push(s_idx);
            }
        }
    }
    Plan { splats, tiles, width: w, height: h }
}

/// `(falloff, quadratic form)` of a splat at pixel `(px, py)` when inside the
/// cutoff ellipse.
fn falloff(s: &Splat2D, px: f64, py: f64, cutoff2: f64) -> Option<(f64, f64, f64)> {
    let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
    let [a, b, c] = s.conic;
    let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if q > cutoff2 {
        return None;
    }
    Some(((-0.5 * q).exp(), dx, dy))
}

struct PixelOut {
    color: [f64; 3],
    depth_sum: f64,
    alpha: f64,
}

fn composite(plan: &Plan, tile: &Tile, px: usize, py: usize, cfg: &RenderConfig) -> PixelOut {
    let cutoff2 = cfg.sigma_cutoff * cfg.sigma_cutoff;
    let mut t = 1.0;
    let mut out = PixelOut { color: [0.0; 3], depth_sum: 0.0, alpha: 0.0 };
    for &si in &tile.splats {
        if t < cfg.min_transmittance {
            break;
        }
        let s = &plan.splats[si];
        let Some((g, _, _)) = falloff(s, px as f64, py as f64, cutoff2) else { continue };
        let a = s.opacity * g;
        let wgt = a * t;
        for c in 0..3 {
            out.color[c] += wgt * s.color[c];
        }
        out.depth_sum += wgt * s.depth;
        out.alpha += wgt;
        t *= 1.0 - a;
    }
    out
}

fn render_plan(plan: &Plan, cfg: &RenderConfig) -> RenderOutput {
    let (w, h) = (plan.width, plan.height);
    let n = w * h;
    let tiles: Vec<Vec<(usize, PixelOut)>> = plan
        .tiles
        .par_iter()
        .map(|tile| {
            let mut px_out = Vec::with_capacity((tile.x1 - tile.x0) * (tile.y1 - tile.y0));
            for py in tile.y0..tile.y1 {
                for px in tile.x0..tile.x1 {
                    px_out.push((py * w + px, composite(plan, tile, px, py, cfg)));
                }
            }
            px_out
        })
        .collect();
    let mut color = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    for (i, p) in tiles.into_iter().flatten() {
        for c in 0..3 {
            color[c * n + i] = p.color[c] + (1.0 - p.alpha) * cfg.background[c];
        }
        depth[i] = if p.alpha > 0.0 { p.depth_sum / p.alpha } else { 0.0 };
        alpha[i] = p.alpha;
    }
    RenderOutput {
        color: Tensor::new(&[3, h, w], color).expect("sized"),
        depth: Tensor::new(&[h, w], depth).expect("sized"),
        alpha: Tensor::new(&[h, w], alpha).expect("sized"),
    }
}

pub fn render_primitives(prims: &Primitives, camera: &Camera, cfg: &RenderConfig) -> RenderOutput {
    render_plan(&plan(prims, camera, cfg), cfg)
}

/// Renders `gaussians` advected to `t_render`.
pub fn render(gaussians: &GaussianSet, camera: &Camera, t_render: f64, cfg: &RenderConfig) -> RenderOutput {
    let (color, opacity) = (gaussians.colors(), gaussians.opacities());
    let prims = primitives(gaussians, &color, &opacity, t_render);
    render_primitives(&prims, camera, cfg)
}

fn primitives<'a>(g: &'a GaussianSet, color: &'a Tensor, opacity: &'a Tensor, t_render: f64) -> Primitives<'a> {
    Primitives {
        mu: g.mu.data(),
        log_scale: g.log_scale.data(),
        quat: g.quat.data(),
        color: color.data(),
        opacity: opacity.data(),
        velocity: g.velocity.data(),
        delta: t_render - g.time,
    }
}

/// Screen-space gradient of one splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    color: [f64; 3],
    opacity: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.depth += o.depth;
        self.opacity += o.opacity;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    falloff: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
}

fn backward_tile(plan: &Plan, tile: &Tile, up: &RenderOutput, cfg: &RenderConfig) -> Vec<SplatGrad> {
    let (w, h) = (plan.width, plan.height);
    let n = w * h;
    let cutoff2 = cfg.sigma_cutoff * cfg.sigma_cutoff;
    let bg = cfg.background;
    let mut grads = vec![SplatGrad::default(); tile.splats.len()];
    let mut contribs: Vec<Contribution> = Vec::new();
    for py in tile.y0..tile.y1 {
        for px in tile.x0..tile.x1 {
            let pix = py * w + px;
            contribs.clear();
            let mut t = 1.0;
            let (mut alpha_sum, mut depth_sum) = (0.0, 0.0);
            for (slot, &si) in tile.splats.iter().enumerate() {
                if t < cfg.min_transmittance {
                    break;
                }
                let s = &plan.splats[si];
                let Some((g, dx, dy)) = falloff(s, px as f64, py as f64, cutoff2) else { continue };
                let a = s.opacity * g;
                contribs.push(Contribution { slot, alpha: a, falloff: g, transmittance: t, dx, dy });
                alpha_sum += a * t;
                depth_sum += a * t * s.depth;
                t *= 1.0 - a;
            }
            if contribs.is_empty() {
                continue;
            }
            let gc = [up.color.data()[pix], up.color.data()[n + pix], up.color.data()[2 * n + pix]];
            let (gd, ga) = (up.depth.data()[pix], up.alpha.data()[pix]);
            let depth = if alpha_sum > 0.0 { depth_sum / alpha_sum } else { 0.0 };
            let mut rest = 0.0;
            for k in contribs.iter().rev() {
                let s = &plan.splats[tile.splats[k.slot]];
                let wgt = k.alpha * k.transmittance;
                let mut gw = ga;
                for c in 0..3 {
                    gw += gc[c] * (s.color[c] - bg[c]);
                }
                let g = &mut grads[k.slot];
                if alpha_sum > 0.0 {
                    gw += gd * (s.depth - depth) / alpha_sum;
                    g.depth += gd * wgt / alpha_sum;
                }
                for c in 0..3 {
                    g.color[c] += gc[c] * wgt;
                }
                let d_alpha = k.transmittance * (gw - rest);
                rest = gw * k.alpha + (1.0 - k.alpha) * rest;
                g.opacity += d_alpha * k.falloff;
                // falloff = exp(-q/2)
                let dq = -0.5 * k.falloff * d_alpha * s.opacity;
                let [a, b, c] = s.conic;
                g.conic[0] += dq * k.dx * k.dx;
                g.conic[1] += dq * 2.0 * k.dx * k.dy;
                g.conic[2] += dq * k.dy * k.dy;
                g.mean[0] -= dq * (2.0 * a * k.dx + 2.0 * b * k.dy);
                g.mean[1] -= dq * (2.0 * b * k.dx + 2.0 * c * k.dy);
            }
        }
    }
    grads
}

/// Gradients of `sum(upstream * render(prims))` with respect to every field.
pub fn render_primitives_backward(
    prims: &Primitives,
    camera: &Camera,
    cfg: &RenderConfig,
    upstream: &RenderOutput,
) -> PrimitiveGrads {
    let plan = plan(prims, camera, cfg);
    let per_tile: Vec<Vec<SplatGrad>> =
        plan.tiles.par_iter().map(|tile| backward_tile(&plan, tile, upstream, cfg)).collect();
    let mut screen = vec![SplatGrad::default(); plan.splats.len()];
    for (tile, grads) in plan.tiles.iter().zip(&per_tile) {
        for (&si, g) in tile.splats.iter().zip(grads) {
            screen[si].add(g);
        }
    }

    let n = prims.len();
    let mut out = PrimitiveGrads {
        mu: vec![0.0; 3 * n],
        log_scale: vec![0.0; 3 * n],
        quat: vec![0.0; 4 * n],
        color: vec![0.0; 3 * n],
        opacity: vec![0.0; n],
        velocity: vec![0.0; 3 * n],
        camera_translation: [0.0; 3],
    };
    let w = camera.extrinsics.rotation_matrix();
    let k = &camera.intrinsics;
    let mut cam_t = Vector3::zeros();
    for (s, sg) in plan.splats.iter().zip(&screen) {
        let i = s.index;
        let p = project(prims, i, camera, cfg).expect("splat was projected in the forward pass");
        for c in 0..3 {
            out.color[3 * i + c] = sg.color[c];
        }
        out.opacity[i] = sg.opacity;

        let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
        let g_cov2 = -(p.conic * g_conic * p.conic);
        let g_cov_cam = p.j.transpose() * g_cov2 * p.j;
        let g_j = 2.0 * g_cov2 * p.j * p.cov_cam;
        let g_cov3 = w.transpose() * g_cov_cam * w;
        let g_m = 2.0 * g_cov3 * p.m;
        let g_rq = g_m * Matrix3::from_diagonal(&p.scale);
        for c in 0..3 {
            let g_s: f64 = (0..3).map(|r| p.rq[(r, c)] * g_m[(r, c)]).sum();
            out.log_scale[3 * i + c] = g_s * p.scale[c];
        }
        let gq = quat_matrix_grad(&prims.quat[4 * i..4 * i + 4], &g_rq);
        out.quat[4 * i..4 * i + 4].copy_from_slice(&gq);

        let (x, y, z) = (p.xc.x, p.xc.y, p.xc.z);
        let (z2, z3) = (z * z, z * z * z);
        let mut g_xc = Vector3::new(
            sg.mean[0] * k.fx / z,
            sg.mean[1] * k.fy / z,
            -sg.mean[0] * k.fx * x / z2 - sg.mean[1] * k.fy * y / z2 + sg.depth,
        );
        g_xc.x += g_j[(0, 2)] * (-k.fx / z2);
        g_xc.y += g_j[(1, 2)] * (-k.fy / z2);
        g_xc.z += g_j[(0, 0)] * (-k.fx / z2)
            + g_j[(0, 2)] * (2.0 * k.fx * x / z3)
            + g_j[(1, 1)] * (-k.fy / z2)
            + g_j[(1, 2)] * (2.0 * k.fy * y / z3);
        cam_t += g_xc;
        let g_mu = w.transpose() * g_xc;
        for c in 0..3 {
            out.mu[3 * i + c] = g_mu[c];
            out.velocity[3 * i + c] = prims.delta * g_mu[c];
        }
    }
    out.camera_translation = [cam_t.x, cam_t.y, cam_t.z];
    out
}

/// Gradients of `sum(upstream * render(gaussians, camera, t_render))`. Color
/// and opacity gradients are with respect to the activated values.
pub fn render_backward(
    gaussians: &GaussianSet,
    camera: &Camera,
    t_render: f64,
    cfg: &RenderConfig,
    upstream: &RenderOutput,
) -> PrimitiveGrads {
    let (color, opacity) = (gaussians.colors(), gaussians.opacities());
    let prims = primitives(gaussians, &color, &opacity, t_render);
    render_primitives_backward(&prims, camera, cfg, upstream)
}

/// Differentiable primitive fields recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RenderInputs<'t> {
    /// `[N, 3]`.
    pub mu: Var<'t>,
    /// `[N, 3]`.
    pub log_scale: Var<'t>,
    /// `[N, 4]`, expected unit length.
    pub quat: Var<'t>,
    /// `[N, 3]` in `[0, 1]`.
    pub color: Var<'t>,
    /// `[N]` in `[0, 1]`.
    pub opacity: Var<'t>,
    /// `[N, 3]`.
    pub velocity: Var<'t>,
}

/// Tape operation: renders to a `[5, H, W]` stack of color, depth and alpha.
pub fn render_var<'t>(inputs: &RenderInputs<'t>, camera: &Camera, delta: f64, cfg: &RenderConfig) -> Var<'t> {
    let vals = [inputs.mu, inputs.log_scale, inputs.quat, inputs.color, inputs.opacity, inputs.velocity].map(|v| v.value());
    let prims = Primitives {
        mu: vals[0].data(),
        log_scale: vals[1].data(),
        quat: vals[2].data(),
        color: vals[3].data(),
        opacity: vals[4].data(),
        velocity: vals[5].data(),
        delta,
    };
    let out = render_primitives(&prims, camera, cfg);
    let (h, w) = (camera.intrinsics.height, camera.intrinsics.width);
    let mut stacked = out.color.into_data();
    stacked.extend_from_slice(out.depth.data());
    stacked.extend_from_slice(out.alpha.data());
    let value = Tensor::new(&[5, h, w], stacked).expect("sized");
    let camera = *camera;
    let cfg = cfg.clone();
    let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
    let parents = [inputs.mu, inputs.log_scale, inputs.quat, inputs.color, inputs.opacity, inputs.velocity];
    inputs.mu.tape().custom(
        &parents,
        value,
        Box::new(move |g, need| {
            let n = h * w;
            let d = g.data();
            let upstream = RenderOutput {
                color: Tensor::new(&[3, h, w], d[..3 * n].to_vec()).expect("sized"),
                depth: Tensor::new(&[h, w], d[3 * n..4 * n].to_vec()).expect("sized"),
                alpha: Tensor::new(&[h, w], d[4 * n..].to_vec()).expect("sized"),
            };
            let prims = Primitives {
                mu: vals[0].data(),
                log_scale: vals[1].data(),
                quat: vals[2].data(),
                color: vals[3].data(),
                opacity: vals[4].data(),
                velocity: vals[5].data(),
                delta,
            };
            let gr = render_primitives_backward(&prims, &camera, &cfg, &upstream);
            [gr.mu, gr.log_scale, gr.quat, gr.color, gr.opacity, gr.velocity]
                .into_iter()
                .zip(&shapes)
                .zip(need)
                .map(|((v, s), &needed)| needed.then(|| Tensor::new(s, v).expect("sized")))
                .collect()
        }),
    )
}
