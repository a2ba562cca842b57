//! Pinhole cameras, unprojection, rigid alignment and point-map differences.
//!
//! Cameras follow the computer-vision convention: x right, y down, z forward.
//! Pixel `(u, v)` is column `u`, row `v`; pixel centers sit on integer
//! coordinates. Extrinsics map world to camera: `x_cam = R x_world + t`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub const Z_NEAR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate intrinsics: {0}")]
    DegenerateIntrinsics(String),
    #[error("zero-norm quaternion")]
    ZeroQuaternion,
    #[error("resolution mismatch: {a:?} vs {b:?}")]
    ResolutionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("invalid camera parameters: {0}")]
    InvalidCamera(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Principal point at the image center.
    pub fn centered(fx: f64, fy: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        Self::new(fx, fy, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
    }

    /// From vertical and horizontal field of view in radians.
    pub fn from_fov(fov_y: f64, fov_x: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI && fov_x > 0.0 && fov_x < std::f64::consts::PI) {
            return Err(GeometryError::InvalidCamera(format!("field of view ({fov_y}, {fov_x}) outside (0, pi)")));
        }
        let fy = height as f64 / (2.0 * (fov_y / 2.0).tan());
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        Self::centered(fx, fy, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite()) || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::DegenerateIntrinsics(format!("fx={}, fy={}", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::DegenerateIntrinsics(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// `(fov_y, fov_x)` in radians.
    pub fn fov(&self) -> (f64, f64) {
        (
            2.0 * (self.height as f64 / (2.0 * self.fy)).atan(),
            2.0 * (self.width as f64 / (2.0 * self.fx)).atan(),
        )
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self, GeometryError> {
        Ok(Self::new(unit_quat(q)?, Vector3::from(t)))
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let r = self.rotation.inverse();
        RigidTransform { rotation: r, translation: -(r * self.translation) }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = canonical(self.rotation);
        [q.w, q.i, q.j, q.k]
    }
}

/// Normalizes a `(w, x, y, z)` quaternion.
pub fn unit_quat(q: [f64; 4]) -> Result<UnitQuaternion<f64>, GeometryError> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(GeometryError::ZeroQuaternion);
    }
    Ok(UnitQuaternion::new_unchecked(Quaternion::new(q[0] / n, q[1] / n, q[2] / n, q[3] / n)))
}

/// Sign-canonical quaternion with `w >= 0`.
pub fn canonical(q: UnitQuaternion<f64>) -> Quaternion<f64> {
    let q = q.into_inner();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Intrinsics plus world-to-camera extrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: RigidTransform,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, extrinsics: RigidTransform) -> Self {
        Self { intrinsics, extrinsics }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.inverse().translation
    }

    /// World-space direction through pixel `(u, v)` scaled so its camera-frame
    /// z component is 1; `center + depth * ray` is the unprojected point.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let d = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.extrinsics.rotation.inverse() * d
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.extrinsics.apply(p)
    }

    /// Pixel coordinates and depth of a world point, `None` behind `Z_NEAR`.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if !(c.z > Z_NEAR) {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }

    pub fn encode(&self) -> CameraParams {
        camera_encode(&self.intrinsics, &self.extrinsics)
    }
}

/// `[quat w,x,y,z | translation | fov_y, fov_x]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams(pub [f64; 9]);

pub fn camera_encode(k: &Intrinsics, e: &RigidTransform) -> CameraParams {
    let q = e.quat_wxyz();
    let (fy, fx) = k.fov();
    let t = e.translation;
    CameraParams([q[0], q[1], q[2], q[3], t.x, t.y, t.z, fy, fx])
}

/// Decodes at the given image extents; the principal point is the image
/// center.
pub fn camera_decode(g: &CameraParams, width: usize, height: usize) -> Result<(Intrinsics, RigidTransform), GeometryError> {
    let g = &g.0;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::InvalidCamera("non-finite parameter".into()));
    }
    let rotation = unit_quat([g[0], g[1], g[2], g[3]])?;
    let k = Intrinsics::from_fov(g[7], g[8], width, height)?;
    Ok((k, RigidTransform::new(rotation, Vector3::new(g[4], g[5], g[6]))))
}

/// Per-pixel 3D points `[3, H, W]` with a validity mask. Invalid pixels hold
/// zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub points: Tensor,
    pub valid: Vec<bool>,
    pub view: usize,
    pub time: usize,
}

impl PointMap {
    pub fn height(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.points.shape()[2]
    }

    pub fn point(&self, idx: usize) -> Vector3<f64> {
        let n = self.height() * self.width();
        let d = self.points.data();
        Vector3::new(d[idx], d[n + idx], d[2 * n + idx])
    }

    fn from_points(pts: &[Vector3<f64>], valid: Vec<bool>, h: usize, w: usize, view: usize, time: usize) -> Self {
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        for (i, p) in pts.iter().enumerate() {
            if valid[i] {
                data[i] = p.x;
                data[n + i] = p.y;
                data[2 * n + i] = p.z;
            }
        }
        Self { points: Tensor::new(&[3, h, w], data).expect("sized"), valid, view, time }
    }

    /// Valid points in pixel order.
    pub fn valid_points(&self) -> Vec<Vector3<f64>> {
        (0..self.valid.len()).filter(|&i| self.valid[i]).map(|i| self.point(i)).collect()
    }
}

/// Lifts a depth map `[H, W]` to world points. Pixels with non-positive or
/// non-finite depth are invalid.
pub fn unproject(depth: &Tensor, camera: &Camera) -> Result<PointMap, GeometryError> {
    camera.intrinsics.validate()?;
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let k = &camera.intrinsics;
    if (h, w) != (k.height, k.width) {
        return Err(GeometryError::ResolutionMismatch { a: (h, w), b: (k.height, k.width) });
    }
    let center = camera.center();
    let mut pts = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let d = depth.data()[v * w + u];
            let ok = d.is_finite() && d > 0.0;
            valid.push(ok);
            pts.push(if ok { center + camera.ray(u as f64, v as f64) * d } else { Vector3::zeros() });
        }
    }
    Ok(PointMap::from_points(&pts, valid, h, w, 0, 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[2, H, W]`: u then v.
    pub pixels: Tensor,
    pub depth: Tensor,
    pub valid: Vec<bool>,
}

/// Projects every valid point; points behind the near plane become invalid.
pub fn project(points: &PointMap, camera: &Camera) -> Projection {
    let (h, w) = (points.height(), points.width());
    let n = h * w;
    let mut pixels = vec![0.0; 2 * n];
    let mut depth = vec![0.0; n];
    let mut valid = vec![false; n];
    for i in 0..n {
        if !points.valid[i] {
            continue;
        }
        if let Some((u, v, z)) = camera.project_point(&points.point(i)) {
            pixels[i] = u;
            pixels[n + i] = v;
            depth[i] = z;
            valid[i] = true;
        }
    }
    Projection {
        pixels: Tensor::new(&[2, h, w], pixels).expect("sized"),
        depth: Tensor::new(&[h, w], depth).expect("sized"),
        valid,
    }
}

/// Applies `t` to every valid point.
pub fn to_reference(p: &PointMap, t: &RigidTransform) -> PointMap {
    let pts: Vec<Vector3<f64>> =
        (0..p.valid.len()).map(|i| if p.valid[i] { t.apply(&p.point(i)) } else { Vector3::zeros() }).collect();
    PointMap::from_points(&pts, p.valid.clone(), p.height(), p.width(), p.view, p.time)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    /// `[3, H, W]`, zero where invalid.
    pub delta: Tensor,
    pub valid: Vec<bool>,
}

/// `P_later - P_t` where both pixels are valid.
pub fn displacement(p_t: &PointMap, p_later: &PointMap) -> Result<DisplacementField, GeometryError> {
    let (a, b) = ((p_t.height(), p_t.width()), (p_later.height(), p_later.width()));
    if a != b {
        return Err(GeometryError::ResolutionMismatch { a, b });
    }
    let n = a.0 * a.1;
    let valid: Vec<bool> = p_t.valid.iter().zip(&p_later.valid).map(|(&x, &y)| x && y).collect();
    let mut delta = vec![0.0; 3 * n];
    for c in 0..3 {
        for i in 0..n {
            if valid[i] {
                delta[c * n + i] = p_later.points.data()[c * n + i] - p_t.points.data()[c * n + i];
            }
        }
    }
    Ok(DisplacementField { delta: Tensor::new(&[3, a.0, a.1], delta).expect("sized"), valid })
}

/// JSON camera record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub quat_wxyz: [f64; 4],
    pub trans_xyz: [f64; 3],
    pub view: usize,
    pub time: usize,
}

impl CameraRecord {
    pub fn new(camera: &Camera, view: usize, time: usize) -> Self {
        let k = camera.intrinsics;
        let t = camera.extrinsics.translation;
        let q = camera.extrinsics.rotation.into_inner();
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            quat_wxyz: [q.w, q.i, q.j, q.k],
            trans_xyz: [t.x, t.y, t.z],
            view,
            time,
        }
    }

    /// Bit-exact inverse of [`CameraRecord::new`].
    pub fn camera(&self) -> Result<Camera, GeometryError> {
        let k = Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        let [w, x, y, z] = self.quat_wxyz;
        if w * w + x * x + y * y + z * z == 0.0 {
            return Err(GeometryError::ZeroQuaternion);
        }
        let rotation = UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z));
        Ok(Camera::new(k, RigidTransform::new(rotation, Vector3::from(self.trans_xyz))))
    }
}
