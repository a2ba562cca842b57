//! Procedural driving-like scenes and their exact ground truth.
//!
//! Scenes are built in a ground-aligned scene frame (y down, ground plane at
//! `y = ground_y`, ego camera rig at the origin at frame 0). Ground truth is
//! expressed in the world frame, which is the camera frame of view 0 at
//! frame 0. Images come from a direct raycaster: each pixel casts one ray and
//! takes the nearest analytic intersection with the ground plane, boxes and
//! spheres.
//!
//! Point maps of later times follow material points: the ground-truth point
//! of pixel `(v, t)` at time `t + d` is `P_t + d * flow_t`, because every
//! object moves with constant velocity.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{unproject, Camera, CameraParams, CameraRecord, GeometryError, Intrinsics, PointMap, RigidTransform, Z_NEAR};
use crate::numerics::container::{self, Bundle, ContainerError};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate scene: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("malformed clip metadata: {0}")]
    Metadata(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box { half: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Center at frame 0, scene frame.
    pub center: [f64; 3],
    /// Meters per frame step, scene frame.
    pub velocity: [f64; 3],
    pub colors: [[f64; 3]; 2],
    pub checker: f64,
}

impl SceneObject {
    fn center_at(&self, time: f64) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.velocity) * time
    }

    fn is_dynamic(&self) -> bool {
        self.velocity.iter().any(|&v| v != 0.0)
    }

    fn contains(&self, p: &Vector3<f64>, time: f64) -> bool {
        let d = p - self.center_at(time);
        match self.shape {
            Shape::Box { half } => (0..3).all(|i| d[i].abs() <= half[i]),
            Shape::Sphere { radius } => d.norm() <= radius,
        }
    }

    /// Nearest hit `(t, normal)` with `t > Z_NEAR` along `o + t d`.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, time: f64) -> Option<(f64, Vector3<f64>)> {
        let c = self.center_at(time);
        match self.shape {
            Shape::Box { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis0 = 0;
                let mut axis1 = 0;
                for i in 0..3 {
                    let (lo, hi) = (c[i] - half[i], c[i] + half[i]);
                    if d[i] == 0.0 {
                        if o[i] < lo || o[i] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((lo - o[i]) / d[i], (hi - o[i]) / d[i]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis0 = i;
                    }
                    if b < t1 {
                        t1 = b;
                        axis1 = i;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > Z_NEAR { (t0, axis0) } else if t1 > Z_NEAR { (t1, axis1) } else { return None };
                let mut n = Vector3::zeros();
                n[axis] = if (o[axis] + t * d[axis]) > c[axis] { 1.0 } else { -1.0 };
                Some((t, n))
            }
            Shape::Sphere { radius } => {
                let oc = o - c;
                let a = d.dot(d);
                let b = oc.dot(d);
                let disc = b * b - a * (oc.dot(&oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > Z_NEAR)?;
                Some((t, (o + d * t - c) / radius))
            }
        }
    }
}

/// Full description of a scene and the clip sampled from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub frames: usize,
    /// Scene time advanced per clip frame.
    pub stride: usize,
    /// Inclusive range the supervision offset is drawn from.
    pub delta_range: (usize, usize),
    pub fov_x: f64,
    pub pitch: f64,
    /// Per-view rig offsets (meters, ego frame) and yaw angles (radians).
    pub rig_offsets: Vec<[f64; 3]>,
    pub rig_yaws: Vec<f64>,
    /// Ego velocity per scene time step; the last entry repeats.
    pub ego_velocities: Vec<[f64; 3]>,
    pub ground_y: f64,
    pub ground_colors: [[f64; 3]; 2],
    pub ground_checker: f64,
    pub sky: [f64; 3],
    pub max_depth: f64,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub objects: Vec<SceneObject>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            views: 2,
            frames: 3,
            stride: 1,
            delta_range: (1, 3),
            fov_x: 70f64.to_radians(),
            pitch: 12f64.to_radians(),
            rig_offsets: vec![[0.0, 0.0, 0.0], [0.6, 0.0, 0.0]],
            rig_yaws: vec![0.0, 8f64.to_radians()],
            ego_velocities: vec![[0.0, 0.0, 0.25]],
            ground_y: 1.6,
            ground_colors: [[0.45, 0.45, 0.42], [0.3, 0.32, 0.3]],
            ground_checker: 1.0,
            sky: [0.55, 0.7, 0.9],
            max_depth: 30.0,
            light_dir: [-0.4, -1.0, -0.3],
            ambient: 0.35,
            objects: Vec::new(),
        }
    }
}

impl SceneSpec {
    /// Default layout with `1..=3` random objects, at least one moving.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=3);
        let mut spec = Self::default();
        spec.objects = (0..n).map(|i| random_object(&mut rng, spec.ground_y, i == 0)).collect();
        spec
    }

    /// Default layout with exactly one moving object.
    pub fn single_mover(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut spec = Self::default();
        spec.objects = vec![random_object(&mut rng, spec.ground_y, true)];
        spec
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    fn ego_position(&self, time: usize) -> Vector3<f64> {
        let last = *self.ego_velocities.last().unwrap_or(&[0.0; 3]);
        (0..time).map(|s| Vector3::from(*self.ego_velocities.get(s).unwrap_or(&last))).sum()
    }

    /// Camera-to-scene pose of view `v` at clip frame `t`.
    fn camera_to_scene(&self, v: usize, t: usize) -> RigidTransform {
        let rig = RigidTransform::new(
            UnitQuaternion::from_euler_angles(0.0, self.rig_yaws[v], 0.0)
                * UnitQuaternion::from_euler_angles(-self.pitch, 0.0, 0.0),
            Vector3::from(self.rig_offsets[v]),
        );
        RigidTransform::translation(self.ego_position(t * self.stride)).compose(&rig)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Degenerate(m));
        if self.width == 0 || self.height == 0 || self.views == 0 || self.frames == 0 || self.stride == 0 {
            return bad("empty extents".into());
        }
        if self.rig_offsets.len() < self.views || self.rig_yaws.len() < self.views {
            return bad(format!("rig describes fewer than {} views", self.views));
        }
        if self.delta_range.0 == 0 || self.delta_range.0 > self.delta_range.1 {
            return bad(format!("invalid delta range {:?}", self.delta_range));
        }
        if !(self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI) {
            return bad(format!("fov {} outside (0, pi)", self.fov_x));
        }
        for t in 0..self.frames {
            let time = (t * self.stride) as f64;
            for v in 0..self.views {
                let c = self.camera_to_scene(v, t).translation;
                if c.y >= self.ground_y {
                    return bad(format!("camera ({v}, {t}) at or below the ground"));
                }
                if let Some(i) = self.objects.iter().position(|o| o.contains(&c, time)) {
                    return bad(format!("camera ({v}, {t}) inside object {i}"));
                }
            }
        }
        Ok(())
    }
}

fn random_object(rng: &mut impl Rng, ground_y: f64, moving: bool) -> SceneObject {
    let shape = if rng.gen_bool(0.5) {
        Shape::Box { half: [rng.gen_range(0.5..1.2), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.2)] }
    } else {
        Shape::Sphere { radius: rng.gen_range(0.6..1.1) }
    };
    let half_y = match shape {
        Shape::Box { half } => half[1],
        Shape::Sphere { radius } => radius,
    };
    let velocity = if moving {
        let speed = rng.gen_range(0.2..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        [speed, 0.0, rng.gen_range(-0.1..0.1)]
    } else {
        [0.0; 3]
    };
    let mut color = || [rng.gen_range(0.2..1.0), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let (a, b) = (color(), color());
    SceneObject {
        shape,
        center: [rng.gen_range(-2.5..2.5), ground_y - half_y, rng.gen_range(6.0..11.0)],
        velocity,
        colors: [a, b.map(|x| 0.5 * x)],
        checker: rng.gen_range(0.3..0.6),
    }
}

/// Ground truth for one view at one clip frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub view: usize,
    pub time: usize,
    pub camera: Camera,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` meters, 0 where invalid.
    pub depth: Tensor,
    /// `[3, H, W]` world frame, 0 where invalid.
    pub points: Tensor,
    pub valid: Vec<bool>,
    /// `[3, H, W]` world-frame velocity of the surface seen by each pixel,
    /// meters per clip frame; 0 where invalid.
    pub flow: Tensor,
    /// Pixels on a moving object.
    pub dynamic: Vec<bool>,
}

impl Frame {
    pub fn point_map(&self) -> PointMap {
        PointMap { points: self.points.clone(), valid: self.valid.clone(), view: self.view, time: self.time }
    }

    /// Ground-truth positions of this frame's surface points `delta` frames
    /// later.
    pub fn future_points(&self, delta: f64) -> PointMap {
        let pts = self.points.zip_map(&self.flow, |p, f| p + delta * f);
        PointMap { points: pts, valid: self.valid.clone(), view: self.view, time: self.time }
    }

    pub fn camera_params(&self) -> CameraParams {
        self.camera.encode()
    }
}

/// A multi-view, multi-frame sample with full ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub frames: usize,
    pub stride: usize,
    /// Supervision offset in clip frames.
    pub delta: usize,
    pub sky: [f64; 3],
    pub seed: u64,
    /// Indexed `view * frames + time`.
    pub data: Vec<Frame>,
}

impl Clip {
    pub fn frame(&self, view: usize, time: usize) -> &Frame {
        &self.data[view * self.frames + time]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

struct Hit {
    depth: f64,
    color: [f64; 3],
    velocity: Vector3<f64>,
    dynamic: bool,
}

fn checker(p: &Vector3<f64>, size: f64, dims: &[usize]) -> bool {
    dims.iter().map(|&i| (p[i] / size).floor() as i64).sum::<i64>().rem_euclid(2) == 0
}

fn shade(albedo: [f64; 3], normal: &Vector3<f64>, light: &Vector3<f64>, ambient: f64) -> [f64; 3] {
    let lambert = normal.dot(light).max(0.0);
    let s = ambient + (1.0 - ambient) * lambert;
    albedo.map(|a| (a * s).clamp(0.0, 1.0))
}

fn cast(spec: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>, time: f64, light: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<(f64, Vector3<f64>, Option<usize>)> = None;
    if d.y > 0.0 {
        let t = (spec.ground_y - o.y) / d.y;
        if t > Z_NEAR {
            best = Some((t, Vector3::new(0.0, -1.0, 0.0), None));
        }
    }
    for (i, obj) in spec.objects.iter().enumerate() {
        if let Some((t, n)) = obj.intersect(o, d, time) {
            if best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, n, Some(i)));
            }
        }
    }
    let (t, n, which) = best?;
    if t > spec.max_depth {
        return None;
    }
    let p = o + d * t;
    let (albedo, velocity, dynamic) = match which {
        None => {
            let c = if checker(&p, spec.ground_checker, &[0, 2]) { 0 } else { 1 };
            (spec.ground_colors[c], Vector3::zeros(), false)
        }
        Some(i) => {
            let obj = &spec.objects[i];
            let local = p - obj.center_at(time);
            let c = if checker(&local, obj.checker, &[0, 1, 2]) { 0 } else { 1 };
            (obj.colors[c], Vector3::from(obj.velocity), obj.is_dynamic())
        }
    };
    Some(Hit { depth: t, color: shade(albedo, &n, light, spec.ambient), velocity, dynamic })
}

/// Renders every `(view, frame)` of `spec` and assembles ground truth. The
/// seed picks the supervision offset.
pub fn generate_clip(spec: &SceneSpec, seed: u64) -> Result<Clip, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = rng.gen_range(spec.delta_range.0..=spec.delta_range.1);
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let k = Intrinsics::from_fov(2.0 * ((h as f64 / w as f64) * (spec.fov_x / 2.0).tan()).atan(), spec.fov_x, w, h)?;
    let world_from_scene = spec.camera_to_scene(0, 0).inverse();
    let light = -Vector3::from(spec.light_dir).normalize();
    let mut data = Vec::with_capacity(spec.views * spec.frames);
    for v in 0..spec.views {
        for t in 0..spec.frames {
            let scene_from_cam = spec.camera_to_scene(v, t);
            let camera = Camera::new(k, world_from_scene.compose(&scene_from_cam).inverse());
            let time = (t * spec.stride) as f64;
            let origin = scene_from_cam.translation;
            let mut image = vec![0.0; 3 * n];
            let mut depth = vec![0.0; n];
            let mut flow = vec![0.0; 3 * n];
            let mut dynamic = vec![false; n];
            for row in 0..h {
                for col in 0..w {
                    let i = row * w + col;
                    let cam_dir = Vector3::new((col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0);
                    let dir = scene_from_cam.rotation * cam_dir;
                    match cast(spec, &origin, &dir, time, &light) {
                        Some(hit) => {
                            depth[i] = hit.depth;
                            let vel = world_from_scene.rotation * hit.velocity * spec.stride as f64;
                            for c in 0..3 {
                                image[c * n + i] = hit.color[c];
                                flow[c * n + i] = vel[c];
                            }
                            dynamic[i] = hit.dynamic;
                        }
                        None => {
                            for c in 0..3 {
                                image[c * n + i] = spec.sky[c];
                            }
                        }
                    }
                }
            }
            let depth = Tensor::new(&[h, w], depth).expect("sized");
            let pm = unproject(&depth, &camera)?;
            data.push(Frame {
                view: v,
                time: t,
                camera,
                image: Tensor::new(&[3, h, w], image).expect("sized"),
                depth,
                points: pm.points,
                valid: pm.valid,
                flow: Tensor::new(&[3, h, w], flow).expect("sized"),
                dynamic,
            });
        }
    }
    Ok(Clip { width: w, height: h, views: spec.views, frames: spec.frames, stride: spec.stride, delta, sky: spec.sky, seed, data })
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    width: usize,
    height: usize,
    views: usize,
    frames: usize,
    stride: usize,
    delta: usize,
    sky: [f64; 3],
    seed: u64,
    cameras: Vec<CameraRecord>,
}

fn entry(v: usize, t: usize, field: &str) -> String {
    format!("v{v}_t{t}/{field}")
}

/// Writes a clip as a DV4D bundle at `path` with its JSON sidecar.
pub fn write_clip(clip: &Clip, path: &Path) -> Result<(), SynthError> {
    let meta = ClipMeta {
        width: clip.width,
        height: clip.height,
        views: clip.views,
        frames: clip.frames,
        stride: clip.stride,
        delta: clip.delta,
        sky: clip.sky,
        seed: clip.seed,
        cameras: clip.data.iter().map(|f| CameraRecord::new(&f.camera, f.view, f.time)).collect(),
    };
    let mut bundle =
        Bundle { meta: serde_json::to_value(&meta).map_err(|e| SynthError::Metadata(e.to_string()))?, ..Default::default() };
    let shape = [clip.height, clip.width];
    for f in &clip.data {
        let (v, t) = (f.view, f.time);
        bundle.push_tensor(entry(v, t, "image"), &f.image);
        bundle.push_tensor(entry(v, t, "depth"), &f.depth);
        bundle.push_tensor(entry(v, t, "points"), &f.points);
        bundle.push_tensor(entry(v, t, "flow"), &f.flow);
        bundle.push_mask(entry(v, t, "valid"), &shape, &f.valid);
        bundle.push_mask(entry(v, t, "dynamic"), &shape, &f.dynamic);
    }
    container::write_bundle(path, &bundle)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<Clip, SynthError> {
    let bundle = container::read_bundle(path)?;
    let meta: ClipMeta = serde_json::from_value(bundle.meta.clone()).map_err(|e| SynthError::Metadata(e.to_string()))?;
    if meta.cameras.len() != meta.views * meta.frames {
        return Err(SynthError::Metadata(format!("{} cameras for {}x{} frames", meta.cameras.len(), meta.views, meta.frames)));
    }
    let mut data = Vec::with_capacity(meta.cameras.len());
    for rec in &meta.cameras {
        let (v, t) = (rec.view, rec.time);
        data.push(Frame {
            view: v,
            time: t,
            camera: rec.camera()?,
            image: bundle.tensor(&entry(v, t, "image"))?,
            depth: bundle.tensor(&entry(v, t, "depth"))?,
            points: bundle.tensor(&entry(v, t, "points"))?,
            valid: bundle.mask(&entry(v, t, "valid"))?,
            flow: bundle.tensor(&entry(v, t, "flow"))?,
            dynamic: bundle.mask(&entry(v, t, "dynamic"))?,
        });
    }
    Ok(Clip {
        width: meta.width,
        height: meta.height,
        views: meta.views,
        frames: meta.frames,
        stride: meta.stride,
        delta: meta.delta,
        sky: meta.sky,
        seed: meta.seed,
        data,
    })
}
