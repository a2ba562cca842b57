//! Evaluation metrics: similarity alignment, point-cloud accuracy,
//! completeness and normal consistency, depth errors, PSNR and SSIM.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub const NORMAL_NEIGHBORS: usize = 10;
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("cross-covariance is rank deficient")]
    RankDeficient,
    #[error("empty mask")]
    EmptyMask,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
}

/// `x -> scale * rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn mean(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64
}

/// Least-squares similarity (or rigid transform when `with_scale` is false)
/// mapping `pred[i]` onto `gt[i]`.
pub fn umeyama_align(pred: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Similarity, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 3 {
        return Err(MetricsError::TooFewPoints { needed: 3, got: pred.len() });
    }
    let n = pred.len() as f64;
    let (mp, mg) = (mean(pred), mean(gt));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dg * dp.transpose();
        var_p += dp.norm_squared();
    }
    cov /= n;
    var_p /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let sv = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    if !(sv[order[1]] > 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE)) {
        return Err(MetricsError::RankDeficient);
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(order[2], order[2])] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if with_scale {
        let trace: f64 = (0..3).map(|i| sv[i] * s[(i, i)]).sum();
        trace / var_p
    } else {
        1.0
    };
    let translation = mg - scale * (rotation * mp);
    Ok(Similarity { scale, rotation, translation })
}

/// Sum of squared residuals `|T(pred_i) - gt_i|^2`.
pub fn alignment_residual(t: &Similarity, pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (t.apply(p) - g).norm_squared()).sum()
}

/// Static k-d tree over 3D points. Nearest-neighbor ties resolve to the
/// lowest point index.
pub struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    index: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm_squared()
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut tree = Self { points, nodes: Vec::with_capacity(points.len()), root: None };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = self.points;
        idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let index = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut rest[1..], depth + 1);
        self.nodes.push(KdNode { index, axis, left, right });
        Some(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `k` nearest points as `(squared distance, index)`, closest first.
    pub fn nearest_k(&self, q: &Vector3<f64>, k: usize) -> Vec<(f64, usize)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(self.root, q, k, &mut heap);
        }
        let mut out: Vec<(f64, usize)> = heap.into_iter().map(|Candidate(d, i)| (d, i)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(f64, usize)> {
        self.nearest_k(q, 1).into_iter().next()
    }

    fn search(&self, node: Option<usize>, q: &Vector3<f64>, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        let p = &self.points[node.index];
        let c = Candidate(dist2(p, q), node.index);
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("full heap") {
            heap.pop();
            heap.push(c);
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0.0 { (node.left, node.right) } else { (node.right, node.left) };
        self.search(near, q, k, heap);
        // equal distances may still win on index, so visit planes at exactly the bound
        if heap.len() < k || diff * diff <= heap.peek().expect("nonempty").0 {
            self.search(far, q, k, heap);
        }
    }
}

/// Nearest-neighbor distance and index in `targets` for every query.
pub fn nearest_neighbors(queries: &[Vector3<f64>], targets: &[Vector3<f64>]) -> Vec<(f64, usize)> {
    let tree = KdTree::new(targets);
    queries
        .iter()
        .map(|q| {
            let (d2, i) = tree.nearest(q).expect("nonempty targets");
            (d2.sqrt(), i)
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_median(v: Vec<f64>) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, median(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccComp {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
}

/// Accuracy (prediction to ground truth) and completeness (ground truth to
/// prediction) nearest-neighbor distances.
pub fn accuracy_completeness(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<AccComp, MetricsError> {
    for side in [pred, gt] {
        if side.is_empty() {
            return Err(MetricsError::TooFewPoints { needed: 1, got: 0 });
        }
    }
    let (acc_mean, acc_median) = mean_median(nearest_neighbors(pred, gt).into_iter().map(|x| x.0).collect());
    let (comp_mean, comp_median) = mean_median(nearest_neighbors(gt, pred).into_iter().map(|x| x.0).collect());
    Ok(AccComp { acc_mean, acc_median, comp_mean, comp_median })
}

/// Unit normals from a plane fit to each point's `k` nearest neighbors
/// (the point included).
pub fn estimate_normals(points: &[Vector3<f64>], k: usize) -> Result<Vec<Vector3<f64>>, MetricsError> {
    if points.len() < k || k < 3 {
        return Err(MetricsError::TooFewPoints { needed: k.max(3), got: points.len() });
    }
    let tree = KdTree::new(points);
    Ok(points
        .iter()
        .map(|p| {
            let nb = tree.nearest_k(p, k);
            let c = nb.iter().fold(Vector3::zeros(), |a, &(_, i)| a + points[i]) / k as f64;
            let mut cov = Matrix3::zeros();
            for &(_, i) in &nb {
                let d = points[i] - c;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let j = (0..3).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("three");
            eig.eigenvectors.column(j).normalize()
        })
        .collect())
}

/// Mean and median `|cos|` between index-paired normals.
pub fn matched_normal_consistency(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<(f64, f64), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::TooFewPoints { needed: 1, got: 0 });
    }
    Ok(mean_median(a.iter().zip(b).map(|(x, y)| x.dot(y).abs().min(1.0)).collect()))
}

/// Normal consistency over the accuracy pairing (each predicted point with
/// its nearest ground-truth point). Normals are estimated with
/// [`NORMAL_NEIGHBORS`] neighbors when not given.
pub fn normal_consistency(
    pred: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    pred_normals: Option<&[Vector3<f64>]>,
    gt_normals: Option<&[Vector3<f64>]>,
) -> Result<(f64, f64), MetricsError> {
    let np = match pred_normals {
        Some(n) => n.to_vec(),
        None => estimate_normals(pred, NORMAL_NEIGHBORS)?,
    };
    let ng = match gt_normals {
        Some(n) => n.to_vec(),
        None => estimate_normals(gt, NORMAL_NEIGHBORS)?,
    };
    let pairs = nearest_neighbors(pred, gt);
    let matched: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| ng[j]).collect();
    matched_normal_consistency(&np, &matched)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
}

/// Abs Rel and the `max(d̂/d, d/d̂) < 1.25` ratio over masked pixels with
/// positive ground truth. With `median_scale` the prediction is first
/// multiplied by `median(gt) / median(pred)`.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, mask: &Tensor, median_scale: bool) -> Result<DepthMetrics, MetricsError> {
    if pred.shape() != gt.shape() || mask.shape() != gt.shape() {
        return Err(MetricsError::Shape(pred.shape().to_vec(), gt.shape().to_vec()));
    }
    let idx: Vec<usize> = (0..gt.numel()).filter(|&i| mask.data()[i] > 0.5 && gt.data()[i] > 0.0).collect();
    if idx.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let s = if median_scale {
        let mp = median(idx.iter().map(|&i| pred.data()[i]).collect());
        let mg = median(idx.iter().map(|&i| gt.data()[i]).collect());
        if mp > 0.0 {
            mg / mp
        } else {
            1.0
        }
    } else {
        1.0
    };
    let n = idx.len() as f64;
    let mut abs_rel = 0.0;
    let mut within = 0usize;
    for &i in &idx {
        let (d, dh) = (gt.data()[i], s * pred.data()[i]);
        abs_rel += (dh - d).abs() / d;
        if dh > 0.0 && (dh / d).max(d / dh) < 1.25 {
            within += 1;
        }
    }
    Ok(DepthMetrics { abs_rel: abs_rel / n, delta_125: within as f64 / n })
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let w: Vec<f64> = (-r..=r).map(|x| (-((x * x) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filtering of an `h x w` plane; taps falling outside
/// the image are dropped and the remaining weights renormalized.
fn blur(x: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let r = win.len() / 2;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let (pos, len) = if horizontal { (xx, w) } else { (y, h) };
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &wt) in win.iter().enumerate() {
                    let Some(q) = (pos + k).checked_sub(r).filter(|&q| q < len) else { continue };
                    let v = if horizontal { src[y * w + q] } else { src[q * w + xx] };
                    acc += wt * v;
                    norm += wt;
                }
                out[y * w + xx] = acc / norm;
            }
        }
        out
    };
    pass(&pass(x, true), false)
}

/// Per-pixel SSIM map of one channel plane.
fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let ma = blur(a, h, w, &win);
    let mb = blur(b, h, w, &win);
    let saa = blur(&prod(&|x, _| x * x), h, w, &win);
    let sbb = blur(&prod(&|_, y| y * y), h, w, &win);
    let sab = blur(&prod(&|x, y| x * y), h, w, &win);
    (0..h * w)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of `[C, H, W]` images in `[0, 1]`, restricted to `mask`
/// (`[H, W]`) when given. SSIM windows are centered on masked pixels.
pub fn image_metrics(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<ImageMetrics, MetricsError> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(MetricsError::Shape(pred.shape().to_vec(), gt.shape().to_vec()));
    }
    let (c, h, w) = (gt.shape()[0], gt.shape()[1], gt.shape()[2]);
    let hw = h * w;
    let sel: Vec<usize> = match mask {
        Some(m) => {
            if m.shape() != [h, w] {
                return Err(MetricsError::Shape(m.shape().to_vec(), vec![h, w]));
            }
            (0..hw).filter(|&i| m.data()[i] > 0.5).collect()
        }
        None => (0..hw).collect(),
    };
    if sel.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let mut se = 0.0;
    let mut ssim = 0.0;
    for ch in 0..c {
        let (a, b) = (&pred.data()[ch * hw..(ch + 1) * hw], &gt.data()[ch * hw..(ch + 1) * hw]);
        se += sel.iter().map(|&i| (a[i] - b[i]).powi(2)).sum::<f64>();
        let map = ssim_map(a, b, h, w);
        ssim += sel.iter().map(|&i| map[i]).sum::<f64>();
    }
    let n = (sel.len() * c) as f64;
    Ok(ImageMetrics { psnr: psnr_from_mse(se / n), ssim: ssim / n })
}

/// Aggregate evaluation report of one clip or a clip set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: f64,
    pub nc_median: f64,
    pub abs_rel: f64,
    pub delta_125: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub dynamic_psnr: Option<f64>,
    pub dynamic_ssim: Option<f64>,
    /// Frame `t` Gaussians advected to `t + 1`, dynamic pixels of `t + 1`.
    pub advected_dynamic_psnr: Option<f64>,
    /// As `advected_dynamic_psnr` with velocities forced to zero.
    pub static_dynamic_psnr: Option<f64>,
    /// Mean `|ν - flow|` over valid pixels, meters per frame step.
    pub velocity_error: Option<f64>,
    /// Mean per-pixel L1 norm of the unaligned point-map error, meters.
    pub point_l1: f64,
}

impl MetricReport {
    /// Field-wise mean; optional fields average over reports that have them.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(MetricReport {
            acc_mean: avg(&|r| r.acc_mean),
            acc_median: avg(&|r| r.acc_median),
            comp_mean: avg(&|r| r.comp_mean),
            comp_median: avg(&|r| r.comp_median),
            nc_mean: avg(&|r| r.nc_mean),
            nc_median: avg(&|r| r.nc_median),
            abs_rel: avg(&|r| r.abs_rel),
            delta_125: avg(&|r| r.delta_125),
            psnr: avg(&|r| r.psnr),
            ssim: avg(&|r| r.ssim),
            dynamic_psnr: opt(&|r| r.dynamic_psnr),
            dynamic_ssim: opt(&|r| r.dynamic_ssim),
            advected_dynamic_psnr: opt(&|r| r.advected_dynamic_psnr),
            static_dynamic_psnr: opt(&|r| r.static_dynamic_psnr),
            velocity_error: opt(&|r| r.velocity_error),
            point_l1: avg(&|r| r.point_l1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    fn brute(queries: &[Vector3<f64>], targets: &[Vector3<f64>]) -> Vec<(f64, usize)> {
        queries
            .iter()
            .map(|q| {
                let mut best = (f64::INFINITY, usize::MAX);
                for (j, t) in targets.iter().enumerate() {
                    let d = (q - t).norm_squared();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                (best.0.sqrt(), best.1)
            })
            .collect()
    }

    #[test]
    fn umeyama_identity_and_scale() {
        let gt = cloud(30, 1);
        let t = umeyama_align(&gt, &gt, true).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-12 && t.translation.norm() < 1e-12);
        let half: Vec<_> = gt.iter().map(|p| p * 0.5).collect();
        let t = umeyama_align(&half, &gt, true).unwrap();
        assert!((t.scale - 2.0).abs() < 1e-9);
        assert!((t.rotation - Matrix3::identity()).norm() < 1e-9 && t.translation.norm() < 1e-9);
    }

    #[test]
    fn umeyama_recovers_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let pred = cloud(50, rng.gen());
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let truth = Similarity {
                scale: rng.gen_range(0.2..5.0),
                rotation: *q.to_rotation_matrix().matrix(),
                translation: Vector3::new(rng.gen_range(-3.0..3.0), 1.0, rng.gen_range(-3.0..3.0)),
            };
            let gt: Vec<_> = pred.iter().map(|p| truth.apply(p)).collect();
            let t = umeyama_align(&pred, &gt, true).unwrap();
            assert!((t.scale - truth.scale).abs() < 1e-9);
            assert!((t.rotation - truth.rotation).norm() < 1e-9);
            assert!((t.translation - truth.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn umeyama_handles_reflection_and_degeneracy() {
        let pred = cloud(40, 3);
        let mirror: Vec<_> = pred.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let t = umeyama_align(&pred, &mirror, true).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert_eq!(umeyama_align(&line, &line, true), Err(MetricsError::RankDeficient));
        assert!(matches!(umeyama_align(&pred[..2], &pred[..2], true), Err(MetricsError::TooFewPoints { .. })));
        assert!(umeyama_align(&pred, &pred[..5], true).is_err());
        let planar: Vec<_> = cloud(20, 4).iter().map(|p| Vector3::new(p.x, p.y, 0.0)).collect();
        assert!(umeyama_align(&planar, &planar, true).is_ok());
    }

    proptest! {
        #[test]
        fn scaled_alignment_never_fits_worse(seed in 0u64..500) {
            let pred = cloud(15, seed);
            let gt: Vec<_> = cloud(15, seed + 1000).iter().zip(&pred).map(|(n, p)| p * 1.7 + n * 0.3).collect();
            let rigid = umeyama_align(&pred, &gt, false).unwrap();
            let sim = umeyama_align(&pred, &gt, true).unwrap();
            prop_assert!(alignment_residual(&sim, &pred, &gt) <= alignment_residual(&rigid, &pred, &gt) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn acc_comp_swap_and_order_invariance(seed in 0u64..200) {
            let a = cloud(25, seed);
            let b = cloud(18, seed + 500);
            let ab = accuracy_completeness(&a, &b).unwrap();
            let ba = accuracy_completeness(&b, &a).unwrap();
            prop_assert_eq!(ab.acc_mean, ba.comp_mean);
            prop_assert_eq!(ab.acc_median, ba.comp_median);
            let mut r = a.clone();
            r.reverse();
            let rb = accuracy_completeness(&r, &b).unwrap();
            prop_assert!((rb.acc_mean - ab.acc_mean).abs() < 1e-15 && rb.acc_median == ab.acc_median);
            prop_assert!((rb.comp_mean - ab.comp_mean).abs() < 1e-15 && rb.comp_median == ab.comp_median);
        }
    }

    #[test]
    fn kd_tree_matches_brute_force_exactly() {
        let targets = cloud(200, 10);
        let queries = cloud(200, 11);
        assert_eq!(nearest_neighbors(&queries, &targets), brute(&queries, &targets));
        // duplicated targets resolve to the lowest index
        let mut dup = targets.clone();
        dup.extend_from_slice(&targets);
        dup.rotate_right(7);
        assert_eq!(nearest_neighbors(&queries, &dup), brute(&queries, &dup));
        let grid: Vec<_> = (0..125).map(|i| Vector3::new((i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64)).collect();
        let mid: Vec<_> = grid.iter().map(|p| p + Vector3::new(0.5, 0.5, 0.5)).collect();
        assert_eq!(nearest_neighbors(&mid, &grid), brute(&mid, &grid));
        let tree = KdTree::new(&grid);
        let k = tree.nearest_k(&Vector3::new(2.0, 2.0, 2.0), 7);
        assert_eq!(k[0], (0.0, 62));
        assert_eq!(k.iter().map(|x| x.1).collect::<Vec<_>>(), vec![62, 37, 57, 61, 63, 67, 87]);
    }

    #[test]
    fn acc_comp_examples() {
        let a = cloud(30, 1);
        let r = accuracy_completeness(&a, &a).unwrap();
        assert_eq!((r.acc_mean, r.acc_median, r.comp_mean, r.comp_median), (0.0, 0.0, 0.0, 0.0));
        let r = accuracy_completeness(&[Vector3::new(0.0, 0.0, 3.0)], &[Vector3::new(0.0, 4.0, 0.0)]).unwrap();
        assert_eq!((r.acc_mean, r.comp_mean), (5.0, 5.0));
        assert!(accuracy_completeness(&[], &a).is_err());
    }

    fn plane(n: usize, normal_axis: usize, offset: f64, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                p[normal_axis] = offset;
                p
            })
            .collect()
    }

    #[test]
    fn normal_consistency_examples() {
        let a = cloud(60, 2);
        let (m, _) = normal_consistency(&a, &a, None, None).unwrap();
        assert!((m - 1.0).abs() < 1e-12);
        let (p, q) = (plane(80, 2, 0.0, 3), plane(80, 2, 0.5, 4));
        let (m, med) = normal_consistency(&p, &q, None, None).unwrap();
        assert!((m - 1.0).abs() < 1e-6 && (med - 1.0).abs() < 1e-6);
        let np = estimate_normals(&p, NORMAL_NEIGHBORS).unwrap();
        let nq = estimate_normals(&plane(80, 0, 0.0, 5), NORMAL_NEIGHBORS).unwrap();
        let (m, _) = matched_normal_consistency(&np, &nq).unwrap();
        assert!(m < 1e-3);
        assert!(estimate_normals(&a[..5], NORMAL_NEIGHBORS).is_err());
    }

    #[test]
    fn depth_metric_examples() {
        let gt = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Tensor::ones(&[2, 2]);
        assert_eq!(depth_metrics(&gt, &gt, &m, true).unwrap(), DepthMetrics { abs_rel: 0.0, delta_125: 1.0 });
        let r = depth_metrics(&gt.scale(1.3), &gt, &m, false).unwrap();
        assert!((r.abs_rel - 0.3).abs() < 1e-12 && r.delta_125 == 0.0);
        assert!(depth_metrics(&gt.scale(1.3), &gt, &m, true).unwrap().abs_rel < 1e-12);
        let gt = Tensor::from_vec(vec![1.0, 2.0]);
        let pred = Tensor::from_vec(vec![1.1, 2.0]);
        let r = depth_metrics(&pred, &gt, &Tensor::ones(&[2]), false).unwrap();
        assert!((r.abs_rel - 0.05).abs() < 1e-12 && r.delta_125 == 1.0);
        assert_eq!(depth_metrics(&pred, &gt, &Tensor::zeros(&[2]), false), Err(MetricsError::EmptyMask));
    }

    /// Direct windowed SSIM: every window is summed explicitly.
    fn ssim_direct(a: &Tensor, b: &Tensor) -> f64 {
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let r = (SSIM_WINDOW / 2) as i64;
        let g = |d: i64| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        let mut total = 0.0;
        for ch in 0..c {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (mut sw, mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            let wt = g(dy) * g(dx);
                            let (p, q) = (a.get(&[ch, yy as usize, xx as usize]), b.get(&[ch, yy as usize, xx as usize]));
                            sw += wt;
                            sx += wt * p;
                            sy += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (mx, my) = (sx / sw, sy / sw);
                    let (vx, vy, cxy) = (sxx / sw - mx * mx, syy / sw - my * my, sxy / sw - mx * my);
                    total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                }
            }
        }
        total / (c * h * w) as f64
    }

    #[test]
    fn image_metric_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::new(&[3, 16, 20], (0..960).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let r = image_metrics(&img, &img, None).unwrap();
        assert_eq!(r.psnr, PSNR_CAP);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        let off = img.map(|x| x + 0.1);
        assert!((image_metrics(&off, &img, None).unwrap().psnr - 20.0).abs() < 1e-9);
        let noisy = Tensor::new(img.shape(), img.data().iter().map(|&x| x + rng.gen_range(-0.01..0.01)).collect()).unwrap();
        let r = image_metrics(&noisy, &img, None).unwrap();
        assert!((r.ssim - ssim_direct(&noisy, &img)).abs() < 1e-6);
        assert!(r.ssim < 1.0);
        let mut mask = Tensor::zeros(&[16, 20]);
        mask.set(&[3, 4], 1.0);
        let full = image_metrics(&noisy, &img, Some(&Tensor::ones(&[16, 20]))).unwrap();
        assert_eq!(full, r);
        let one = image_metrics(&noisy, &img, Some(&mask)).unwrap();
        let se: f64 = (0..3).map(|c| (noisy.get(&[c, 3, 4]) - img.get(&[c, 3, 4])).powi(2)).sum::<f64>() / 3.0;
        assert!((one.psnr - psnr_from_mse(se)).abs() < 1e-12);
        assert_eq!(image_metrics(&noisy, &img, Some(&Tensor::zeros(&[16, 20]))), Err(MetricsError::EmptyMask));
    }

    #[test]
    fn report_mean_averages_fields() {
        let a = MetricReport { psnr: 10.0, dynamic_psnr: Some(4.0), ..Default::default() };
        let b = MetricReport { psnr: 20.0, ..Default::default() };
        let m = MetricReport::mean(&[a, b]).unwrap();
        assert_eq!((m.psnr, m.dynamic_psnr), (15.0, Some(4.0)));
        assert!(MetricReport::mean(&[]).is_none());
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), m);
    }
}
