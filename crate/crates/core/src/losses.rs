//! Training objectives.
//!
//! Every L1 term uses the zero subgradient at a zero residual. Losses over
//! an empty valid set evaluate to 0 and report `empty = true`.

use serde::{Deserialize, Serialize};

use crate::numerics::{huber, Tensor, Var};

pub const HUBER_DELTA: f64 = 0.1;
/// Weight of the spatial-gradient term of [`loss_geo`].
pub const GEO_GRADIENT_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub temp: f64,
    pub gs: f64,
    pub dist: f64,
    pub flow: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { temp: 0.01, gs: 0.1, dist: 0.1, flow: 0.01 }
    }
}

/// A scalar loss and whether its valid set was empty.
#[derive(Clone, Copy, Debug)]
pub struct Loss<'t> {
    pub value: Var<'t>,
    pub empty: bool,
}

impl<'t> Loss<'t> {
    fn zero(like: Var<'t>) -> Self {
        Self { value: like.tape().scalar(0.0), empty: true }
    }
}

fn intersect(masks: &[&Tensor]) -> Tensor {
    let mut out = masks[0].map(|m| if m > 0.5 { 1.0 } else { 0.0 });
    for m in &masks[1..] {
        out = out.zip_map(m, |a, b| if a > 0.5 && b > 0.5 { 1.0 } else { 0.0 });
    }
    out
}

/// Repeats a `[B, H, W]` weight over `c` channels as `[B, c, H, W]`.
fn per_channel(w: &Tensor, c: usize) -> Tensor {
    let s = w.shape();
    let hw: usize = s[1..].iter().product();
    let mut data = Vec::with_capacity(w.numel() * c);
    for b in 0..s[0] {
        let plane = &w.data()[b * hw..(b + 1) * hw];
        for _ in 0..c {
            data.extend_from_slice(plane);
        }
    }
    let mut shape = vec![s[0], c];
    shape.extend_from_slice(&s[1..]);
    Tensor::new(&shape, data).expect("sized")
}

fn check(pred: &[usize], gt: &[usize], what: &str) {
    assert_eq!(pred, gt, "{what}: prediction and target shapes differ");
}

/// Temporal consistency: mean over pixels valid in every mask of the L1
/// norm of `(gt_fut - gt_t) - (pred_fut - pred_t)`. Point maps are
/// `[B, 3, H, W]`, masks `[B, H, W]`.
pub fn loss_temp<'t>(gt_t: &Tensor, gt_fut: &Tensor, pred_t: Var<'t>, pred_fut: Var<'t>, masks: &[&Tensor]) -> Loss<'t> {
    check(&pred_t.shape(), gt_t.shape(), "loss_temp");
    check(&pred_fut.shape(), gt_fut.shape(), "loss_temp");
    let mask = intersect(masks);
    let n = mask.sum();
    if n == 0.0 {
        return Loss::zero(pred_t);
    }
    let gt_disp = gt_fut.zip_map(gt_t, |a, b| a - b);
    let weights = per_channel(&mask, 3).scale(1.0 / n);
    let r = pred_fut.sub(pred_t).sub(pred_t.tape().constant(gt_disp));
    Loss { value: r.abs().mul_const(&weights).sum(), empty: false }
}

/// Huber loss between predicted and ground-truth camera vectors `[..., 9]`
/// (`quat wxyz | translation | fov`), summed over frames. Both quaternions
/// are flipped to `w >= 0` first.
pub fn loss_cam<'t>(pred: Var<'t>, gt: &Tensor) -> Loss<'t> {
    check(&pred.shape(), gt.shape(), "loss_cam");
    let flip = |t: &Tensor| -> Tensor {
        let d: Vec<f64> = t
            .data()
            .chunks(9)
            .flat_map(|g| {
                let s = if g[0] < 0.0 { -1.0 } else { 1.0 };
                (0..9).map(move |i| if i < 4 { s } else { 1.0 })
            })
            .collect();
        Tensor::new(t.shape(), d).expect("sized")
    };
    let gt = gt.zip_map(&flip(gt), |a, s| a * s);
    let pred = pred.mul_const(&flip(&pred.value()));
    let r = pred.sub(pred.tape().constant(gt));
    Loss { value: huber(r, HUBER_DELTA).expect("positive delta"), empty: false }
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

/// Depth or point-map loss: masked L1 on values plus
/// `GEO_GRADIENT_WEIGHT` times masked L1 on horizontal and vertical finite
/// differences, with every frame divided by the median ground-truth
/// magnitude over its valid pixels. `pred`, `gt` are `[B, C, H, W]`, `mask`
/// `[B, H, W]`.
pub fn loss_geo<'t>(pred: Var<'t>, gt: &Tensor, mask: &Tensor) -> Loss<'t> {
    check(&pred.shape(), gt.shape(), "loss_geo");
    let s = gt.shape().to_vec();
    let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let mask = intersect(&[mask]);
    let mut inv_scale = vec![0.0; nb];
    for (b, inv) in inv_scale.iter_mut().enumerate() {
        let mags: Vec<f64> = (0..hw)
            .filter(|&i| mask.data()[b * hw + i] > 0.5)
            .map(|i| (0..c).map(|k| gt.data()[(b * c + k) * hw + i].powi(2)).sum::<f64>().sqrt())
            .collect();
        if !mags.is_empty() {
            let m = median(mags);
            *inv = if m > 0.0 { 1.0 / m } else { 1.0 };
        }
    }
    let n = mask.sum();
    if n == 0.0 {
        return Loss::zero(pred);
    }
    let tape = pred.tape();
    let scaled = |m: &Tensor| -> Tensor {
        let per = m.shape()[1..].iter().product::<usize>();
        let d = m.data().iter().enumerate().map(|(i, &x)| x * inv_scale[i / per]).collect();
        Tensor::new(m.shape(), d).expect("sized")
    };
    let gt_v = tape.constant(gt.clone());
    let value = pred.sub(gt_v).abs().mul_const(&per_channel(&scaled(&mask), c).scale(1.0 / n)).sum();

    // pairs of horizontally / vertically adjacent valid pixels
    let pair_mask = |axis: usize| -> Tensor {
        let (ph, pw) = if axis == 3 { (h, w - 1) } else { (h - 1, w) };
        let (dy, dx) = if axis == 3 { (0, 1) } else { (1, 0) };
        let mut d = Vec::with_capacity(nb * ph * pw);
        for b in 0..nb {
            for y in 0..ph {
                for x in 0..pw {
                    let a = mask.data()[b * hw + y * w + x];
                    let o = mask.data()[b * hw + (y + dy) * w + x + dx];
                    d.push(a * o);
                }
            }
        }
        Tensor::new(&[nb, ph, pw], d).expect("sized")
    };
    let diff = |x: Var<'t>, axis: usize| {
        let len = x.shape()[axis] - 1;
        x.slice(axis, 1, len).sub(x.slice(axis, 0, len))
    };
    let mut grad_terms = Vec::new();
    let mut pairs = 0.0;
    for axis in [2, 3] {
        if s[axis] < 2 {
            continue;
        }
        let pm = pair_mask(axis);
        pairs += pm.sum();
        grad_terms.push((diff(pred, axis).sub(diff(gt_v, axis)).abs(), per_channel(&scaled(&pm), c)));
    }
    let total = if pairs > 0.0 {
        let g = grad_terms
            .into_iter()
            .map(|(r, wt)| r.mul_const(&wt.scale(GEO_GRADIENT_WEIGHT / pairs)).sum())
            .reduce(|a, b| a.add(b))
            .expect("at least one axis");
        value.add(g)
    } else {
        value
    };
    Loss { value: total, empty: false }
}

/// Mean absolute error over masked elements. `mask` has the shape of
/// `pred`, of `pred` without its last axis (`[B, N, 3]` vs `[B, N]`) or
/// without its channel axis (`[B, C, H, W]` vs `[B, H, W]`).
pub fn masked_l1<'t>(pred: Var<'t>, target: Var<'t>, mask: &Tensor) -> Loss<'t> {
    masked(pred, target, mask, false)
}

/// Mean squared error over masked elements; see [`masked_l1`].
pub fn masked_mse<'t>(pred: Var<'t>, target: Var<'t>, mask: &Tensor) -> Loss<'t> {
    masked(pred, target, mask, true)
}

fn masked<'t>(pred: Var<'t>, target: Var<'t>, mask: &Tensor, squared: bool) -> Loss<'t> {
    let shape = pred.shape();
    assert_eq!(shape, target.shape(), "masked loss: prediction and target shapes differ");
    let m = intersect(&[mask]);
    let m = if m.shape() == shape.as_slice() {
        m
    } else if m.shape() == &shape[..shape.len() - 1] {
        let c = shape[shape.len() - 1];
        Tensor::new(&shape, m.data().iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect()).expect("sized")
    } else {
        assert!(shape.len() == m.rank() + 1 && shape[0] == m.shape()[0] && shape[2..] == m.shape()[1..], "mask shape");
        per_channel(&m, shape[1])
    };
    let n = m.sum();
    if n == 0.0 {
        return Loss::zero(pred);
    }
    let r = pred.sub(target);
    let r = if squared { r.square() } else { r.abs() };
    Loss { value: r.mul_const(&m.scale(1.0 / n)).sum(), empty: false }
}

/// Inputs of [`loss_render`]; images `[B, 3, H, W]`, depths `[B, H, W]`,
/// velocities and flow `[B, N, 3]` with masks `[B, N]`.
#[derive(Clone, Copy, Debug)]
pub struct RenderTargets<'a, 't> {
    pub rendered: Var<'t>,
    pub image: &'a Tensor,
    pub image_mask: &'a Tensor,
    pub rendered_depth: Var<'t>,
    pub depth_sup: &'a Tensor,
    pub depth_sup_mask: &'a Tensor,
    pub gaussian_depth: Var<'t>,
    pub teacher_depth: Var<'t>,
    pub distill_mask: &'a Tensor,
    pub velocity: Var<'t>,
    pub flow: &'a Tensor,
    pub flow_mask: &'a Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderBreakdown {
    pub rgb: f64,
    pub gsdepth: f64,
    pub distill: f64,
    pub flow: f64,
    pub total: f64,
}

/// `MSE(I, Î) + gs * L1(D_gs, D_sup) + dist * L1(D_g, sg(D_pm)) +
/// flow * MSE(ν, s)`.
pub fn loss_render<'t>(t: &RenderTargets<'_, 't>, w: &LossWeights) -> (Var<'t>, RenderBreakdown) {
    let tape = t.rendered.tape();
    let rgb = masked_mse(t.rendered, tape.constant(t.image.clone()), t.image_mask);
    let gsdepth = masked_l1(t.rendered_depth, tape.constant(t.depth_sup.clone()), t.depth_sup_mask);
    let distill = masked_l1(t.gaussian_depth, t.teacher_depth.stop_gradient(), t.distill_mask);
    let flow = masked_mse(t.velocity, tape.constant(t.flow.clone()), t.flow_mask);
    let total = rgb
        .value
        .add(gsdepth.value.scale(w.gs))
        .add(distill.value.scale(w.dist))
        .add(flow.value.scale(w.flow));
    let breakdown = RenderBreakdown {
        rgb: rgb.value.item(),
        gsdepth: gsdepth.value.item(),
        distill: distill.value.item(),
        flow: flow.value.item(),
        total: total.item(),
    };
    (total, breakdown)
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Components<'t> {
    pub cam: Var<'t>,
    pub depth: Var<'t>,
    pub point_t: Var<'t>,
    pub point_fut: Var<'t>,
    pub temp: Var<'t>,
}

/// `L_cam + L_depth + L_point(t) + L_point(t + δ) + temp * L_temp`.
pub fn stage1_total<'t>(c: &Stage1Components<'t>, w: &LossWeights) -> Var<'t> {
    c.cam.add(c.depth).add(c.point_t).add(c.point_fut).add(c.temp.scale(w.temp))
}

pub fn stage2_total<'t>(stage1: Var<'t>, render_total: Var<'t>) -> Var<'t> {
    stage1.add(render_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_mask(shape: &[usize], seed: u64) -> Tensor {
        rand_tensor(shape, seed).map(|x| if x > -0.6 { 1.0 } else { 0.0 })
    }

    #[test]
    fn temp_is_zero_at_ground_truth_and_offset_invariant() {
        let tape = Tape::new();
        let (a, b) = (rand_tensor(&[2, 3, 4, 5], 1), rand_tensor(&[2, 3, 4, 5], 2));
        let m = rand_mask(&[2, 4, 5], 3);
        let l = loss_temp(&a, &b, tape.constant(a.clone()), tape.constant(b.clone()), &[&m, &m]);
        assert_eq!(l.value.item(), 0.0);
        let (pa, pb) = (rand_tensor(&[2, 3, 4, 5], 4), rand_tensor(&[2, 3, 4, 5], 5));
        let off = rand_tensor(&[2, 3, 4, 5], 6);
        let base = loss_temp(&a, &b, tape.constant(pa.clone()), tape.constant(pb.clone()), &[&m]).value.item();
        let shifted = loss_temp(
            &a,
            &b,
            tape.constant(pa.zip_map(&off, |x, o| x + o)),
            tape.constant(pb.zip_map(&off, |x, o| x + o)),
            &[&m],
        )
        .value
        .item();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn temp_hand_case() {
        let tape = Tape::new();
        // two valid points: GT displacement (1,0,0) and (0,0,0), predicted none
        let gt_t = Tensor::zeros(&[1, 3, 1, 2]);
        let gt_fut = Tensor::new(&[1, 3, 1, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let pred = tape.constant(Tensor::zeros(&[1, 3, 1, 2]));
        let m = Tensor::ones(&[1, 1, 2]);
        let l = loss_temp(&gt_t, &gt_fut, pred, pred, &[&m]);
        assert_eq!(l.value.item(), 0.5);
        let none = Tensor::zeros(&[1, 1, 2]);
        let l = loss_temp(&gt_t, &gt_fut, pred, pred, &[&m, &none]);
        assert!(l.empty && l.value.item() == 0.0);
    }

    #[test]
    fn cam_examples() {
        let tape = Tape::new();
        let g = Tensor::new(&[1, 9], vec![0.6, 0.8, 0.0, 0.0, 0.1, 0.2, 0.3, 1.0, 1.2]).unwrap();
        assert_eq!(loss_cam(tape.constant(g.clone()), &g).value.item(), 0.0);
        let flipped = Tensor::new(&[1, 9], vec![-0.6, -0.8, 0.0, 0.0, 0.1, 0.2, 0.3, 1.0, 1.2]).unwrap();
        assert_eq!(loss_cam(tape.constant(flipped), &g).value.item(), 0.0);
        let r = tape.constant(Tensor::from_vec(vec![0.5, 0.0]));
        assert_eq!(huber(r, 1.0).unwrap().item(), 0.125);
        let mut off = g.clone();
        off.data_mut()[4] += 0.5;
        let expected = HUBER_DELTA * (0.5 - 0.5 * HUBER_DELTA);
        assert!((loss_cam(tape.constant(off), &g).value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn geo_examples() {
        let tape = Tape::new();
        let gt = Tensor::full(&[1, 1, 4, 4], 5.0);
        let m = Tensor::ones(&[1, 4, 4]);
        assert_eq!(loss_geo(tape.constant(gt.clone()), &gt, &m).value.item(), 0.0);
        let e = 0.25;
        let l = loss_geo(tape.constant(gt.map(|x| x + e)), &gt, &m).value.item();
        assert!((l - e / 5.0).abs() < 1e-15);

        let gt = rand_tensor(&[2, 3, 5, 6], 1);
        let m = rand_mask(&[2, 5, 6], 2);
        let pred = rand_tensor(&[2, 3, 5, 6], 3);
        let base = loss_geo(tape.constant(pred.clone()), &gt, &m).value.item();
        let mut perturbed = pred.clone();
        for b in 0..2 {
            for y in 0..5 {
                for x in 0..6 {
                    if m.get(&[b, y, x]) == 0.0 {
                        for c in 0..3 {
                            perturbed.set(&[b, c, y, x], 1e3 * (b + c + x) as f64);
                        }
                    }
                }
            }
        }
        assert_eq!(loss_geo(tape.constant(perturbed), &gt, &m).value.item(), base);
        let l = loss_geo(tape.constant(pred), &gt, &Tensor::zeros(&[2, 5, 6]));
        assert!(l.empty && l.value.item() == 0.0);
    }

    #[test]
    fn l1_subgradient_is_zero_at_zero_residual() {
        let tape = Tape::new();
        let t = rand_tensor(&[1, 2, 3, 3], 4);
        let p = tape.var(t.clone());
        let l = masked_l1(p, tape.constant(t.clone()), &Tensor::ones(&[1, 3, 3]))
            .value
            .add(loss_geo(p, &t, &Tensor::ones(&[1, 3, 3])).value);
        let g = tape.backward(l).unwrap();
        assert!(g.get_or_zeros(p).data().iter().all(|&x| x == 0.0));
    }

    fn render_targets<'a, 't>(
        tape: &'t Tape,
        img: &'a Tensor,
        depth: &'a Tensor,
        flow: &'a Tensor,
        masks: &'a (Tensor, Tensor),
        perfect: bool,
    ) -> (RenderTargets<'a, 't>, Var<'t>) {
        let jitter = |t: &Tensor, s| if perfect { t.clone() } else { t.zip_map(&rand_tensor(t.shape(), s), |a, b| a + 0.3 * b) };
        let teacher = tape.var(jitter(depth, 9));
        (
            RenderTargets {
                rendered: tape.var(jitter(img, 1)),
                image: img,
                image_mask: &masks.0,
                rendered_depth: tape.var(jitter(depth, 2)),
                depth_sup: depth,
                depth_sup_mask: &masks.0,
                gaussian_depth: tape.var(jitter(depth, 3)),
                teacher_depth: if perfect { tape.constant(depth.clone()) } else { teacher },
                distill_mask: &masks.0,
                velocity: tape.var(jitter(flow, 4)),
                flow,
                flow_mask: &masks.1,
            },
            teacher,
        )
    }

    #[test]
    fn render_loss_breakdown_and_stop_gradient() {
        let img = rand_tensor(&[2, 3, 4, 4], 1);
        let depth = rand_tensor(&[2, 4, 4], 2).map(|x| 3.0 + x);
        let flow = rand_tensor(&[2, 16, 3], 3);
        let masks = (rand_mask(&[2, 4, 4], 4), rand_mask(&[2, 16], 5));
        let w = LossWeights::default();
        let tape = Tape::new();
        let (t, _) = render_targets(&tape, &img, &depth, &flow, &masks, true);
        let (total, b) = loss_render(&t, &w);
        assert_eq!(total.item(), 0.0);
        assert_eq!((b.rgb, b.gsdepth, b.distill, b.flow), (0.0, 0.0, 0.0, 0.0));

        let tape = Tape::new();
        let (t, teacher) = render_targets(&tape, &img, &depth, &flow, &masks, false);
        let (total, b) = loss_render(&t, &w);
        let expected = b.rgb + 0.1 * b.gsdepth + 0.1 * b.distill + 0.01 * b.flow;
        assert!((total.item() - expected).abs() < 1e-15 && b.distill > 0.0);
        assert_eq!(b.total, total.item());
        let g = tape.backward(total).unwrap();
        assert!(g.get(teacher).is_none());
        assert!(g.get(t.gaussian_depth).is_some());
    }

    #[test]
    fn stage_totals() {
        let tape = Tape::new();
        let one = tape.scalar(1.0);
        let c = Stage1Components { cam: one, depth: one, point_t: one, point_fut: one, temp: one };
        assert!((stage1_total(&c, &LossWeights::default()).item() - 4.01).abs() < 1e-15);
        let z = tape.scalar(0.0);
        let c0 = Stage1Components { cam: z, depth: z, point_t: z, point_fut: z, temp: z };
        assert_eq!(stage1_total(&c0, &LossWeights::default()).item(), 0.0);
        let two = tape.scalar(2.0);
        let s = stage1_total(&Stage1Components { cam: two, ..c }, &LossWeights::default());
        assert!((s.item() - 5.01).abs() < 1e-15);
        assert_eq!(stage2_total(tape.scalar(2.0), tape.scalar(3.0)).item(), 5.0);
        assert_eq!(stage2_total(z, tape.scalar(3.0)).item(), 3.0);
    }

    #[test]
    fn losses_pass_grad_check() {
        let opts = GradCheckOptions::default();
        for seed in 0..3u64 {
            let gt = rand_tensor(&[2, 3, 4, 5], seed);
            let gt2 = rand_tensor(&[2, 3, 4, 5], seed + 10);
            let m = rand_mask(&[2, 4, 5], seed + 20);
            let x = rand_tensor(&[2, 3, 4, 5], seed + 30);
            let fut = rand_tensor(&[2, 3, 4, 5], seed + 40);
            let cases: Vec<(&str, Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>>)> = vec![
                ("temp", Box::new(|tape, v| loss_temp(&gt, &gt2, v, tape.constant(fut.clone()), &[&m]).value)),
                ("temp_fut", Box::new(|tape, v| loss_temp(&gt, &gt2, tape.constant(fut.clone()), v, &[&m]).value)),
                ("geo", Box::new(|_, v| loss_geo(v, &gt, &m).value)),
                ("l1", Box::new(|tape, v| masked_l1(v, tape.constant(gt.clone()), &m).value)),
                ("mse", Box::new(|tape, v| masked_mse(v, tape.constant(gt.clone()), &m).value)),
            ];
            for (name, f) in cases {
                let r = grad_check(|t, v| f(t, v), &x, &opts).unwrap();
                assert!(r.passed, "{name} seed {seed}: {r:?}");
            }
            let cam_gt = rand_tensor(&[3, 9], seed + 50);
            let r = grad_check(|_, v| loss_cam(v, &cam_gt).value, &rand_tensor(&[3, 9], seed + 60), &opts).unwrap();
            assert!(r.passed, "cam seed {seed}: {r:?}");
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(seed in 0u64..1000) {
            let tape = Tape::new();
            let gt = rand_tensor(&[1, 3, 3, 4], seed);
            let p = tape.constant(rand_tensor(&[1, 3, 3, 4], seed + 1));
            let m = rand_mask(&[1, 3, 4], seed + 2);
            prop_assert!(loss_geo(p, &gt, &m).value.item() >= 0.0);
            prop_assert!(loss_temp(&gt, &gt, p, p, &[&m]).value.item() >= 0.0);
            prop_assert!(masked_mse(p, tape.constant(gt.clone()), &m).value.item() >= 0.0);
            let cam = rand_tensor(&[2, 9], seed + 3);
            prop_assert!(loss_cam(tape.constant(rand_tensor(&[2, 9], seed + 4)), &cam).value.item() >= 0.0);
        }
    }
}
