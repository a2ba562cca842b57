//! Finite-difference gradient checks of each differentiable component on
//! small random instances, shared by the CLI and the test suites.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::geometry::{Camera, Intrinsics, RigidTransform};
use crate::harness::HarnessError;
use crate::heads::{frame, fuse, CameraHead, DenseHead, FutureHead, GaussianHead, HeadsConfig};
use crate::losses::{loss_cam, loss_geo, loss_render, loss_temp, masked_l1, masked_mse, LossWeights, RenderTargets};
use crate::mta::{Mta, MtaConfig};
use crate::numerics::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::rasterizer::{render_var, RenderConfig, RenderInputs};

/// Relative tolerance of the network and loss checks.
pub const NETWORK_TOL: f64 = 1e-4;
/// Relative tolerance of the end-to-end rasterizer check.
pub const RASTER_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    Encoder,
    Mta,
    Heads,
    Losses,
    Rasterizer,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 5] =
        [CheckTarget::Encoder, CheckTarget::Mta, CheckTarget::Heads, CheckTarget::Losses, CheckTarget::Rasterizer];

    pub fn name(self) -> &'static str {
        match self {
            CheckTarget::Encoder => "encoder",
            CheckTarget::Mta => "mta",
            CheckTarget::Heads => "heads",
            CheckTarget::Losses => "losses",
            CheckTarget::Rasterizer => "rasterizer",
        }
    }
}

impl FromStr for CheckTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CheckTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown module {s:?}; expected one of encoder, mta, heads, losses, rasterizer"))
    }
}

pub type CheckResults = Vec<(String, GradCheckReport)>;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn rand_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, (0..shape.iter().product()).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect())
        .expect("sized")
}

fn prefixed(prefix: &str, r: CheckResults) -> CheckResults {
    r.into_iter().map(|(n, rep)| (format!("{prefix}/{n}"), rep)).collect()
}

/// Runs the checks of `target` on instances drawn from `seed`.
pub fn run_gradcheck(target: CheckTarget, seed: u64) -> Result<CheckResults, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() }.with_tol(NETWORK_TOL);
    let num = |e: crate::numerics::NumericsError| HarnessError::Config(e.to_string());
    match target {
        CheckTarget::Encoder => {
            let cfg = EncoderConfig {
                height: 16,
                width: 16,
                patch: 8,
                dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
                max_frames: 4,
                cross_view: true,
            };
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, &cfg, &mut rng)?;
            let images = rand_tensor(&[2, 2, 3, 16, 16], &mut rng).map(|x| 0.5 + 0.5 * x);
            let w = rand_tensor(&[2, 2, 4, 8], &mut rng);
            let r = grad_check_params(
                &store,
                |tape, p| {
                    let out = enc.forward(p, tape, &images).expect("shapes fixed");
                    out.layers[0].mul_const(&w).sum().add(out.camera.square().sum())
                },
                &opts.with_max_coords(12),
            )
            .map_err(num)?;
            Ok(prefixed("encoder", r))
        }
        CheckTarget::Mta => {
            let cfg = MtaConfig { layers: 2, motion_tokens: 2, heads: 2, ..Default::default() };
            let mut store = ParamStore::new();
            let mta = Mta::new(&mut store, &cfg, 4, &mut rng);
            let aa = [rand_tensor(&[1, 3, 4, 4], &mut rng), rand_tensor(&[1, 3, 4, 4], &mut rng)];
            let w = rand_tensor(&[1, 3, 6, 4], &mut rng);
            let mut out = prefixed(
                "mta",
                grad_check_params(
                    &store,
                    |tape, p| {
                        let layers: Vec<Var> = aa.iter().map(|a| tape.constant(a.clone())).collect();
                        mta.forward(p, tape, &layers).expect("shapes fixed").ta.mul_const(&w).sum()
                    },
                    &opts,
                )
                .map_err(num)?,
            );
            let r = grad_check(
                |tape, x| {
                    let layers = [x, tape.constant(aa[1].clone())];
                    mta.forward(&store.bind(tape), tape, &layers).expect("shapes fixed").ta.mul_const(&w).sum()
                },
                &aa[0],
                &opts,
            )
            .map_err(num)?;
            out.push(("mta/input".into(), r));
            Ok(out)
        }
        CheckTarget::Heads => {
            let cfg = HeadsConfig { channels: 3, upsample: 1, ..Default::default() };
            let mut store = ParamStore::new();
            let gh = GaussianHead::new(&mut store, "gaussian", 8, 4, 3, &cfg, &mut rng)?;
            let dense = DenseHead::new(&mut store, "points", 8, 4, &cfg, 3, &mut rng)?;
            let fph = FutureHead::new(&mut store, "future", 8, 4, &cfg, &mut rng)?;
            let cam_head = CameraHead::new(&mut store, "camera", 8, &cfg, &mut rng);
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05));
            }
            let (h, w) = (4, 8);
            let cam = Camera::new(Intrinsics::centered(6.0, 6.0, w, h).expect("valid"), RigidTransform::identity());
            let ta = rand_tensor(&[1, 2, 8], &mut rng);
            let motion = rand_tensor(&[1, 3, 8], &mut rng);
            let cam_tokens = rand_tensor(&[2, 8], &mut rng);
            let image = rand_tensor(&[1, 3, h, w], &mut rng).map(|x| 0.5 + 0.4 * x);
            let weights = rand_tensor(&[5, h, w], &mut rng);
            let fut_w = rand_tensor(&[1, 3, h, w], &mut rng);
            let cam_w = rand_tensor(&[2, 9], &mut rng);
            let r = grad_check_params(
                &store,
                |tape, p| {
                    let ta = tape.constant(ta.clone());
                    let pts = dense.forward(p, ta, (1, 2)).expect("shapes fixed");
                    let fut = fph.predict_future(p, ta, (1, 2), pts, 2.0).expect("shapes fixed");
                    let f = gh.gaussian_decode(p, ta, (1, 2)).expect("shapes fixed");
                    let app = gh.appearance.appearance_features(p, tape.constant(image.clone()));
                    let fused = fuse(app, f.features).expect("shapes fixed");
                    let bases = frame(gh.velocity_bases(p, tape.constant(motion.clone())), 0);
                    let g = gh.init_gaussians(p, frame(fused, 0), frame(f.depth, 0), &cam, bases, 0.0).expect("shapes fixed");
                    let img = render_var(&g.render_inputs(), &cam, 1.0, &RenderConfig::default());
                    let cams = cam_head.forward(p, tape.constant(cam_tokens.clone()));
                    img.mul_const(&weights).sum().add(fut.mul_const(&fut_w).sum()).add(cams.mul_const(&cam_w).sum())
                },
                &opts.with_max_coords(12),
            )
            .map_err(num)?;
            Ok(prefixed("heads", r))
        }
        CheckTarget::Losses => {
            let shape = [2, 3, 4, 5];
            let gt = rand_tensor(&shape, &mut rng);
            let gt2 = rand_tensor(&shape, &mut rng);
            let m = rand_mask(&[2, 4, 5], &mut rng);
            let x = rand_tensor(&shape, &mut rng);
            let other = rand_tensor(&shape, &mut rng);
            let mut out = CheckResults::new();
            type Case<'a> = Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t> + 'a>;
            let cases: Vec<(&str, Case)> = vec![
                ("temp/t", Box::new(|tape, v| loss_temp(&gt, &gt2, v, tape.constant(other.clone()), &[&m]).value)),
                ("temp/future", Box::new(|tape, v| loss_temp(&gt, &gt2, tape.constant(other.clone()), v, &[&m]).value)),
                ("geo", Box::new(|_, v| loss_geo(v, &gt, &m).value)),
                ("l1", Box::new(|tape, v| masked_l1(v, tape.constant(gt.clone()), &m).value)),
                ("mse", Box::new(|tape, v| masked_mse(v, tape.constant(gt.clone()), &m).value)),
            ];
            for (name, f) in cases {
                out.push((format!("losses/{name}"), grad_check(|t, v| f(t, v), &x, &opts).map_err(num)?));
            }
            let cam_gt = rand_tensor(&[3, 9], &mut rng);
            let cam_x = rand_tensor(&[3, 9], &mut rng);
            out.push(("losses/cam".into(), grad_check(|_, v| loss_cam(v, &cam_gt).value, &cam_x, &opts).map_err(num)?));

            let (b, h, w, n) = (2, 3, 4, 12);
            let inputs = [
                rand_tensor(&[b, 3, h, w], &mut rng).map(|v| 0.5 + 0.4 * v),
                rand_tensor(&[b, h, w], &mut rng).map(|v| 3.0 + v),
                rand_tensor(&[b, h, w], &mut rng).map(|v| 3.0 + v),
                rand_tensor(&[b, h, w], &mut rng).map(|v| 3.0 + v),
                rand_tensor(&[b, n, 3], &mut rng),
            ];
            let image = rand_tensor(&[b, 3, h, w], &mut rng).map(|v| 0.5 + 0.5 * v);
            let depth = rand_tensor(&[b, h, w], &mut rng).map(|v| 3.0 + v);
            let ones = Tensor::ones(&[b, h, w]);
            let flow = rand_tensor(&[b, n, 3], &mut rng);
            let flow_mask = rand_mask(&[b, n], &mut rng);
            let sup_mask = rand_mask(&[b, h, w], &mut rng);
            let weights = LossWeights::default();
            // the teacher input is detached, so it is left out
            let names = ["rendered", "rendered_depth", "gaussian_depth", "", "velocity"];
            for (k, name) in names.iter().enumerate().filter(|(_, n)| !n.is_empty()) {
                let r = grad_check(
                    |tape, v| {
                        let var = |j: usize| if j == k { v } else { tape.constant(inputs[j].clone()) };
                        let t = RenderTargets {
                            rendered: var(0),
                            image: &image,
                            image_mask: &ones,
                            rendered_depth: var(1),
                            depth_sup: &depth,
                            depth_sup_mask: &sup_mask,
                            gaussian_depth: var(2),
                            teacher_depth: var(3),
                            distill_mask: &ones,
                            velocity: var(4),
                            flow: &flow,
                            flow_mask: &flow_mask,
                        };
                        loss_render(&t, &weights).0
                    },
                    &inputs[k],
                    &opts,
                )
                .map_err(num)?;
                out.push((format!("losses/render/{name}"), r));
            }
            Ok(out)
        }
        CheckTarget::Rasterizer => {
            let (w, h, n) = (16, 16, 5);
            let cam = Camera::new(
                Intrinsics::centered(14.0, 14.0, w, h).expect("valid"),
                RigidTransform::from_wxyz([0.99, 0.05, -0.08, 0.02], [0.05, -0.1, 0.2]).expect("valid"),
            );
            let mut fields: Vec<Tensor> = Vec::new();
            let mut mu = Vec::new();
            for _ in 0..n {
                let z = rng.gen_range(2.0..4.0);
                mu.extend([rng.gen_range(-0.4..0.4) * z, rng.gen_range(-0.4..0.4) * z, z]);
            }
            fields.push(Tensor::new(&[n, 3], mu).expect("sized"));
            fields.push(Tensor::new(&[n, 3], (0..3 * n).map(|_| rng.gen_range(-2.2..-1.2)).collect()).expect("sized"));
            let mut quat = Vec::new();
            for _ in 0..n {
                let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                quat.extend(q.iter().map(|x| x / norm));
            }
            fields.push(Tensor::new(&[n, 4], quat).expect("sized"));
            fields.push(Tensor::new(&[n, 3], (0..3 * n).map(|_| rng.gen_range(0.1..0.9)).collect()).expect("sized"));
            fields.push(Tensor::new(&[n], (0..n).map(|_| rng.gen_range(0.2..0.8)).collect()).expect("sized"));
            fields.push(Tensor::new(&[n, 3], (0..3 * n).map(|_| rng.gen_range(-0.1..0.1)).collect()).expect("sized"));
            let weights = rand_tensor(&[5, h, w], &mut rng);
            let names = ["mu", "log_scale", "quat", "color", "opacity", "velocity"];
            let mut out = CheckResults::new();
            for (k, name) in names.iter().enumerate() {
                let r = grad_check(
                    |tape, v| {
                        let f = |j: usize| if j == k { v } else { tape.constant(fields[j].clone()) };
                        let inputs =
                            RenderInputs { mu: f(0), log_scale: f(1), quat: f(2), color: f(3), opacity: f(4), velocity: f(5) };
                        render_var(&inputs, &cam, 1.5, &RenderConfig::default()).mul_const(&weights).sum()
                    },
                    &fields[k],
                    &opts.with_tol(RASTER_TOL),
                )
                .map_err(num)?;
                out.push((format!("rasterizer/{name}"), r));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse_back() {
        for t in CheckTarget::ALL {
            assert_eq!(t.name().parse::<CheckTarget>().unwrap(), t);
        }
        assert!("decoder".parse::<CheckTarget>().is_err());
    }

    #[test]
    fn every_target_passes_one_seed() {
        for t in CheckTarget::ALL {
            let results = run_gradcheck(t, 11).unwrap();
            assert!(!results.is_empty());
            for (name, r) in results {
                assert!(r.passed, "{name}: {r:?}");
            }
        }
    }
}
