//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. Pass criterion names (`A1`, `A5`, ...)
//! as arguments to run a subset.

use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dv4d::diagnostics::{run_gradcheck, CheckTarget, NETWORK_TOL, RASTER_TOL};
use dv4d::geometry::{Camera, Intrinsics, RigidTransform};
use dv4d::harness::{
    clip_losses, evaluate, supervision_masks, train_stage, ClipTensors, EvalOptions, Model, TrainConfig,
};
use dv4d::heads::GaussianSet;
use dv4d::losses::{loss_render, LossWeights, RenderTargets};
use dv4d::metrics::{image_metrics, nearest_neighbors, umeyama_align, KdTree, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use dv4d::mta::{attention_weights, rope_temporal, temporal_attention, Mta, MtaConfig};
use dv4d::numerics::container::{self, Bundle, ContainerError};
use dv4d::numerics::{ParamStore, Tape, Tensor};
use dv4d::rasterizer::{render, render_backward, RenderConfig, RenderOutput};
use dv4d::synth::{generate_clip, read_clip, write_clip, Clip, SceneSpec, SynthError};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_set(n: usize, rng: &mut ChaCha8Rng, velocity: bool) -> GaussianSet {
    let mut mu = Vec::new();
    for _ in 0..n {
        let z = rng.gen_range(2.0..5.0);
        mu.extend([rng.gen_range(-0.5..0.5) * z, rng.gen_range(-0.5..0.5) * z, z]);
    }
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    };
    GaussianSet {
        mu: Tensor::new(&[n, 3], mu).unwrap(),
        log_scale: t(&[n, 3], -3.0, -1.5),
        quat: t(&[n, 4], -1.0, 1.0),
        color_logit: t(&[n, 3], -2.0, 2.0),
        opacity_logit: t(&[n], -1.0, 2.0),
        velocity: if velocity { t(&[n, 3], -0.2, 0.2) } else { Tensor::zeros(&[n, 3]) },
        time: 1.0,
        offset: 0.0,
    }
}

fn camera(w: usize, h: usize) -> Camera {
    Camera::new(
        Intrinsics::centered(0.9 * w as f64, 0.9 * h as f64, w, h).unwrap(),
        RigidTransform::from_wxyz([0.995, 0.03, -0.05, 0.01], [0.1, -0.05, 0.2]).unwrap(),
    )
}

fn a1_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst_net: f64 = 0.0;
    let mut worst_raster: f64 = 0.0;
    let mut checks = 0;
    for target in CheckTarget::ALL {
        for seed in 0..3 {
            for (name, r) in run_gradcheck(target, seed).map_err(|e| e.to_string())? {
                ensure(r.passed, || format!("{name} seed {seed}: rel {:.2e}", r.max_rel_error))?;
                checks += 1;
                if target == CheckTarget::Rasterizer {
                    worst_raster = worst_raster.max(r.max_rel_error);
                } else {
                    worst_net = worst_net.max(r.max_rel_error);
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "{checks} checks over 3 seeds; worst rel error {worst_net:.1e} (tol {NETWORK_TOL:.0e}), rasterizer {worst_raster:.1e} (tol {RASTER_TOL:.0e}); {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn a2_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_row: f64 = 0.0;
    for _ in 0..20 {
        let q = rand_tensor(&[3, 5, 8], &mut rng).scale(8.0);
        let k = rand_tensor(&[3, 5, 8], &mut rng).scale(8.0);
        for row in attention_weights(&q, &k, 2).data().chunks(5) {
            ensure(row.iter().all(|&x| x >= 0.0), || "negative attention weight".into())?;
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst_row < 1e-9, || format!("row sum off by {worst_row:.1e}"))?;

    let tape = Tape::new();
    let (q, k, v) = (rand_tensor(&[4, 1, 8], &mut rng), rand_tensor(&[4, 1, 8], &mut rng), rand_tensor(&[4, 1, 8], &mut rng));
    let out = temporal_attention(tape.constant(q), tape.constant(k), tape.constant(v.clone()), 2);
    ensure(*out.value() == v, || "single-frame attention is not the identity on values".into())?;

    let q = rand_tensor(&[2, 4, 16], &mut rng);
    let k = rand_tensor(&[2, 4, 16], &mut rng);
    let times = [0.0, 1.0, 2.0, 3.0];
    let logits = |shift: f64| {
        let t: Vec<f64> = times.iter().map(|x| x + shift).collect();
        let rq = rope_temporal(tape.constant(q.clone()), 1, &t, 1e4).unwrap().value();
        let rk = rope_temporal(tape.constant(k.clone()), 1, &t, 1e4).unwrap().value();
        attention_weights(&rq, &rk, 2)
    };
    let base = logits(0.0);
    let mut worst_shift: f64 = 0.0;
    for i in -40..=40 {
        let shifted = logits(i as f64 * 0.75);
        worst_shift = worst_shift.max(base.zip_map(&shifted, |a, b| (a - b).abs()).max_abs());
    }
    ensure(worst_shift < 1e-9, || format!("rotary shift changed attention by {worst_shift:.1e}"))?;

    let cfg = MtaConfig { layers: 2, motion_tokens: 2, heads: 2, rope: false, ..Default::default() };
    let mut store = ParamStore::new();
    let mta = Mta::new(&mut store, &cfg, 8, &mut rng);
    let aa = rand_tensor(&[2, 3, 4, 8], &mut rng);
    let perm = [2, 0, 1];
    let permute = |t: &Tensor| {
        let views: Vec<Tensor> =
            (0..t.shape()[0]).map(|v| Tensor::stack(&perm.map(|f| t.index_axis0(v).index_axis0(f))).unwrap()).collect();
        Tensor::stack(&views).unwrap()
    };
    let p = store.bind(&tape);
    let a = mta.forward(&p, &tape, &[tape.constant(aa.clone())]).unwrap().ta.value();
    let b = mta.forward(&p, &tape, &[tape.constant(permute(&aa))]).unwrap().ta.value();
    ensure(*b == permute(&a), || "frame permutation is not equivariant without rotary encoding".into())?;
    Ok(format!("row sums within {worst_row:.1e}; single frame exact; 81 shifts within {worst_shift:.1e}; permutation exact"))
}

fn a3_velocity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = camera(32, 24);
    let cfg = RenderConfig::default();
    let still = random_set(30, &mut rng, false);
    let a = render(&still, &cam, 1.0, &cfg);
    for delta in [0.5, 1.0, 2.0, 3.0, 17.25] {
        ensure(render(&still, &cam, 1.0 + delta, &cfg) == a, || format!("zero velocity render changed at +{delta}"))?;
    }
    let moving = random_set(30, &mut rng, true);
    for (x, y) in [(0.5, 0.25), (1.0, 2.0), (0.125, 1.5)] {
        let two = moving.advect(x).advect(y);
        let one = moving.advect(x + y);
        ensure(two.centers() == one.centers(), || format!("advect({x}) then advect({y}) differs from advect({})", x + y))?;
        ensure(render(&two, &cam, two.current_time(), &cfg) == render(&one, &cam, one.current_time(), &cfg), || {
            "advected renders differ".into()
        })?;
    }
    let up = RenderOutput {
        color: rand_tensor(&[3, 24, 32], &mut rng),
        depth: rand_tensor(&[24, 32], &mut rng),
        alpha: rand_tensor(&[24, 32], &mut rng),
    };
    for delta in [0.0, 1.0, 2.0, 3.0, 0.37] {
        let t_render = moving.time + delta;
        let g = render_backward(&moving, &cam, t_render, &cfg, &up);
        let elapsed = t_render - moving.time;
        for (dv, dm) in g.velocity.iter().zip(&g.mu) {
            ensure(*dv == elapsed * dm, || format!("dL/dv != delta dL/dmu at delta {delta}"))?;
        }
    }
    Ok("zero-velocity renders bit-identical; advection additive exactly; dL/dv = delta dL/dmu exactly".into())
}

fn direct_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut total = 0.0;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (mut sw, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                    let i = (yy * w as i64 + xx) as usize;
                    sw += wt;
                    ma += wt * a[i];
                    mb += wt * b[i];
                    aa += wt * a[i] * a[i];
                    bb += wt * b[i] * b[i];
                    ab += wt * a[i] * b[i];
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let (va, vb, cab) = (aa / sw - ma * ma, bb / sw - mb * mb, ab / sw - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    total / (h * w) as f64
}

fn a4_oracles() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    };
    let (q, t) = (cloud(&mut rng, 200), cloud(&mut rng, 200));
    let fast = nearest_neighbors(&q, &t);
    for (qi, &(d, j)) in q.iter().zip(&fast) {
        let mut best = (f64::INFINITY, 0);
        for (k, p) in t.iter().enumerate() {
            let dd = (qi - p).norm_squared();
            if dd < best.0 {
                best = (dd, k);
            }
        }
        ensure(j == best.1 && d == best.0.sqrt(), || format!("nearest neighbor mismatch: {j} vs {}", best.1))?;
    }
    let tree = KdTree::new(&t);
    ensure(tree.len() == 200, || "tree size".into())?;

    let cam = Camera::new(Intrinsics::centered(20.0, 20.0, 16, 16).unwrap(), RigidTransform::identity());
    let (c1, c2, o1, o2, bg): ([f64; 3], [f64; 3], f64, f64, [f64; 3]) = ([0.9, 0.2, 0.1], [0.1, 0.3, 0.8], 0.6, 0.7, [0.2, 0.4, 0.6]);
    let s: f64 = 0.2;
    let pair = GaussianSet {
        mu: Tensor::new(&[2, 3], vec![0.0, 0.0, 2.0, 0.05, -0.03, 3.0]).unwrap(),
        log_scale: Tensor::full(&[2, 3], s.ln()),
        quat: Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(),
        color_logit: Tensor::new(&[2, 3], c1.iter().chain(&c2).map(|c| (c / (1.0 - c)).ln()).collect()).unwrap(),
        opacity_logit: Tensor::new(&[2], vec![(o1 / (1.0 - o1)).ln(), (o2 / (1.0 - o2)).ln()]).unwrap(),
        velocity: Tensor::zeros(&[2, 3]),
        time: 0.0,
        offset: 0.0,
    };
    let cfg = RenderConfig { background: bg, ..RenderConfig::default() };
    let out = render(&pair, &cam, 0.0, &cfg);
    let mut worst: f64 = 0.0;
    for v in 0..16 {
        for u in 0..16 {
            let (px, py) = (u as f64, v as f64);
            let weight = |mx: f64, my: f64, z: f64, o: f64| {
                let (cx, cy) = (20.0 * mx / z + 7.5, 20.0 * my / z + 7.5);
                // s^2 J J^T plus the low-pass term, J the perspective Jacobian
                let k = 400.0 * s * s / (z * z);
                let (xz, yz) = (mx / z, my / z);
                let (sxx, sxy, syy) = (k * (1.0 + xz * xz) + cfg.low_pass, k * xz * yz, k * (1.0 + yz * yz) + cfg.low_pass);
                let det = sxx * syy - sxy * sxy;
                let (dx, dy) = (px - cx, py - cy);
                let q = (syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy) / det;
                if q > cfg.sigma_cutoff * cfg.sigma_cutoff {
                    0.0
                } else {
                    o * (-0.5 * q).exp()
                }
            };
            let a1 = weight(0.0, 0.0, 2.0, o1);
            let a2 = weight(0.05, -0.03, 3.0, o2);
            let tr = (1.0 - a1) * (1.0 - a2);
            for ch in 0..3 {
                let want = a1 * c1[ch] + (1.0 - a1) * a2 * c2[ch] + tr * bg[ch];
                worst = worst.max((out.color.get(&[ch, v, u]) - want).abs());
            }
            let acc = a1 + (1.0 - a1) * a2;
            let d = if acc > 0.0 { (a1 * 2.0 + (1.0 - a1) * a2 * 3.0) / acc } else { 0.0 };
            worst = worst.max((out.alpha.get(&[v, u]) - acc).abs()).max((out.depth.get(&[v, u]) - d).abs());
        }
    }
    ensure(worst < 1e-9, || format!("two-splat compositing off by {worst:.1e}"))?;

    let (h, w) = (19, 23);
    let a: Vec<f64> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let b: Vec<f64> = a.iter().map(|x| (x + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0)).collect();
    let got = image_metrics(&Tensor::new(&[3, h, w], a.clone()).unwrap(), &Tensor::new(&[3, h, w], b.clone()).unwrap(), None)
        .unwrap()
        .ssim;
    let want = (0..3).map(|c| direct_ssim(&a[c * h * w..(c + 1) * h * w], &b[c * h * w..(c + 1) * h * w], h, w)).sum::<f64>() / 3.0;
    ensure((got - want).abs() < 1e-6, || format!("SSIM {got} vs direct {want}"))?;

    let gt = cloud(&mut rng, 50);
    let rot = Rotation3::from_euler_angles(0.3, -0.7, 1.1);
    let (scale, shift) = (1.7, Vector3::new(0.4, -2.0, 0.9));
    // pred = (gt - shift) / scale rotated back, so the pred -> gt map is (scale, rot, shift)
    let pred: Vec<Vector3<f64>> = gt.iter().map(|g| rot.inverse() * ((g - shift) / scale)).collect();
    let sim = umeyama_align(&pred, &gt, true).unwrap();
    let rot_err = (sim.rotation - rot.matrix()).abs().max();
    let err = (sim.scale - scale).abs().max(rot_err).max((sim.translation - shift).abs().max());
    ensure(err < 1e-9, || format!("Umeyama recovery off by {err:.1e}"))?;
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {:.1}s", elapsed.as_secs_f64()))?;
    Ok(format!(
        "200-point NN exact; two-splat within {worst:.1e}; SSIM within {:.1e}; Umeyama within {err:.1e}; {:.1}s",
        (got - want).abs(),
        elapsed.as_secs_f64()
    ))
}

fn a8_serialization() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = rand_tensor(&[3, 4, 5], &mut rng);
    let bytes = container::encode(&container::Record::from_tensor(&t));
    ensure(container::decode(&bytes).unwrap().to_tensor() == t, || "record round trip".into())?;
    let mut bad = bytes.clone();
    bad[0] = b'X';
    ensure(matches!(container::decode(&bad), Err(ContainerError::BadMagic { .. })), || "bad magic accepted".into())?;
    let mut bad = bytes.clone();
    bad[4] = 9;
    ensure(matches!(container::decode(&bad), Err(ContainerError::UnsupportedVersion { .. })), || "bad version accepted".into())?;
    for _ in 0..200 {
        let cut = rng.gen_range(0..bytes.len());
        ensure(matches!(container::decode(&bytes[..cut]), Err(ContainerError::Truncated { .. })), || {
            format!("truncation at {cut} not rejected")
        })?;
    }

    let clip = generate_clip(&SceneSpec::random(8).with_resolution(32, 24), 8).map_err(|e| e.to_string())?;
    let path = dir.path().join("clip.dv4d");
    write_clip(&clip, &path).map_err(|e| e.to_string())?;
    let back = read_clip(&path).map_err(|e| e.to_string())?;
    ensure(back == clip, || "clip round trip differs".into())?;
    let raw = std::fs::read(&path).unwrap();
    let mut flipped = raw.clone();
    let at = raw.len() / 2;
    flipped[at] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    ensure(
        matches!(read_clip(&path), Err(SynthError::Container(ContainerError::ChecksumMismatch { .. }))),
        || "corrupted clip not rejected with a checksum error".into(),
    )?;
    std::fs::write(&path, &raw[..raw.len() - 7]).unwrap();
    ensure(matches!(read_clip(&path), Err(SynthError::Container(_))), || "truncated clip accepted".into())?;
    let mut b = Bundle::default();
    b.push_tensor("x", &t);
    container::write_bundle(&dir.path().join("b.dv4d"), &b).unwrap();
    ensure(container::read_bundle(&dir.path().join("b.dv4d")).unwrap().tensor("x").unwrap() == t, || "bundle".into())?;

    let set = random_set(300, &mut rng, true);
    let cam = camera(80, 64);
    let cfg = RenderConfig::default();
    let up = RenderOutput {
        color: rand_tensor(&[3, 64, 80], &mut rng),
        depth: rand_tensor(&[64, 80], &mut rng),
        alpha: rand_tensor(&[64, 80], &mut rng),
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let out = render(&set, &cam, 2.0, &cfg);
            let g = render_backward(&set, &cam, 2.0, &cfg, &up);
            (out, g)
        })
    };
    let (o1, g1) = run(1);
    for threads in [2, 3, 8] {
        let (o, g) = run(threads);
        ensure(o == o1 && g == g1, || format!("{threads} threads differ from 1"))?;
    }
    Ok("container and clip round trips bit-exact; magic/version/checksum/200 truncations rejected; renders identical on 1/2/3/8 threads".into())
}

/// Training configuration shared by the training criteria.
fn small_config() -> TrainConfig {
    TrainConfig { peak_lr: 4e-2, channels: 16, log_every: 0, ..TrainConfig::default() }
}

// stage 2 may use fewer than the 3000 allowed steps; the wall-clock budget binds first on one core
const A5_STAGE2_STEPS: usize = 1500;

fn a5_overfit() -> Outcome {
    let t0 = Instant::now();
    let base = small_config();
    let clip = generate_clip(&SceneSpec::random(7).with_resolution(base.width, base.height), 7).map_err(|e| e.to_string())?;
    let clips = std::slice::from_ref(&clip);
    let mut model = Model::new(&base.model_config(), 0).map_err(|e| e.to_string())?;
    let s1 = TrainConfig { stage: 1, steps: 2000, ..base.clone() };
    train_stage(&mut model, clips, &s1).map_err(|e| e.to_string())?;
    let losses = clip_losses(&model, &clip, 1, &s1.weights()).map_err(|e| e.to_string())?;
    let after1 = evaluate(&model, clips, &EvalOptions::default()).map_err(|e| e.to_string())?.mean;
    let t1 = t0.elapsed();

    let s2 = TrainConfig { stage: 2, steps: A5_STAGE2_STEPS, peak_lr: base.peak_lr * 0.25, ..base };
    train_stage(&mut model, clips, &s2).map_err(|e| e.to_string())?;
    let after2 = evaluate(&model, clips, &EvalOptions::default()).map_err(|e| e.to_string())?.mean;
    let elapsed = t0.elapsed();
    let summary = format!(
        "stage 1 ({:.0}s): L_temp {:.2e} (< 1e-3), point L1 {:.4} m (< 0.05); stage 2: PSNR {:.2} dB (> 30); total {:.0}s (< 900)",
        t1.as_secs_f64(),
        losses.temp,
        after1.point_l1,
        after2.psnr,
        elapsed.as_secs_f64()
    );
    let ok = losses.temp < 1e-3 && after1.point_l1 < 0.05 && after2.psnr > 30.0 && elapsed < Duration::from_secs(900);
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn a6_distillation() -> Outcome {
    // teacher branch receives no gradient through the distillation term
    let cfg = TrainConfig { height: 16, width: 16, dim: 16, heads: 2, motion_tokens: 2, channels: 4, ..small_config() };
    let model = Model::new(&cfg.model_config(), 6).map_err(|e| e.to_string())?;
    let clip = generate_clip(&SceneSpec::random(6).with_resolution(16, 16), 6).map_err(|e| e.to_string())?;
    let data = ClipTensors::new(&clip);
    let (nf, h, w) = (data.num_frames(), data.height, data.width);
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let pred = model.forward(&p, &tape, &data.images, data.delta, true).map_err(|e| e.to_string())?;
    let g = pred.gaussians.as_ref().unwrap();
    let teacher = pred.depth;
    let ones = Tensor::ones(&[nf, h, w]);
    let zeros_img = tape.constant(Tensor::zeros(&[nf, 3, h, w]));
    let zeros_depth = tape.constant(Tensor::zeros(&[nf, h, w]));
    let velocity = tape.constant(Tensor::zeros(&[nf, h * w, 3]));
    let targets = RenderTargets {
        rendered: zeros_img,
        image: &data.images_flat,
        image_mask: &ones,
        rendered_depth: zeros_depth,
        depth_sup: &data.depth_flat,
        depth_sup_mask: &ones,
        gaussian_depth: g.depth,
        teacher_depth: teacher,
        distill_mask: &ones,
        velocity,
        flow: &data.flow,
        flow_mask: &data.valid_flat,
    };
    let weights = LossWeights { temp: 0.0, gs: 0.0, dist: 1.0, flow: 0.0 };
    let (loss, parts) = loss_render(&targets, &weights);
    ensure(parts.distill > 0.0, || "distillation term is zero".into())?;
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let mut student_moved = false;
    for (id, gr) in model.store.ids().zip(p.grads(&grads)) {
        let name = model.store.name(id);
        let nonzero = gr.as_ref().is_some_and(|t| t.max_abs() > 0.0);
        if name.starts_with("depth_head") {
            ensure(!nonzero, || format!("teacher parameter {name} received a gradient"))?;
        }
        student_moved |= name.starts_with("gaussian_head") && nonzero;
    }
    ensure(student_moved, || "student received no gradient".into())?;

    // sparse supervision: distilled student vs sparse-only baseline
    let clips: Vec<Clip> = (0..4)
        .map(|s| generate_clip(&SceneSpec::random(600 + s).with_resolution(32, 32), 600 + s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut all = true;
    for seed in 0..3u64 {
        let arm = |dist: f64| -> Result<f64, String> {
            let cfg = TrainConfig {
                stage: 2,
                steps: A6_STEPS,
                seed,
                sparse_fraction: 0.05,
                lambda_dist: dist,
                batch_images: 6,
                ..small_config()
            };
            let mut model = Model::new(&cfg.model_config(), seed).map_err(|e| e.to_string())?;
            train_stage(&mut model, &clips, &cfg).map_err(|e| e.to_string())?;
            held_out_abs_rel(&model, &clips, &cfg)
        };
        let (with, without) = (arm(0.1)?, arm(0.0)?);
        all &= with < without;
        lines.push(format!("seed {seed}: {with:.4} vs {without:.4}"));
    }
    let summary = format!("teacher gradients exactly zero; held-out Gaussian-depth Abs Rel distilled vs sparse-only: {}", lines.join(", "));
    if all {
        Ok(summary)
    } else {
        Err(summary)
    }
}

const A6_STEPS: usize = 400;

/// Abs Rel of the Gaussian depth on valid pixels outside the sparse
/// supervision mask, over all frames of all clips.
fn held_out_abs_rel(model: &Model, clips: &[Clip], cfg: &TrainConfig) -> Result<f64, String> {
    let data: Vec<ClipTensors> = clips.iter().map(ClipTensors::new).collect();
    let masks = supervision_masks(&data, cfg);
    let (mut sum, mut n) = (0.0, 0usize);
    for (d, m) in data.iter().zip(&masks) {
        let tape = Tape::new();
        let p = model.store.bind_where(&tape, |_| false);
        let pred = model.forward(&p, &tape, &d.images, d.delta, true).map_err(|e| e.to_string())?;
        let dg = pred.gaussians.unwrap().depth.value();
        for i in 0..dg.numel() {
            if d.valid.data()[i] > 0.5 && m.data()[i] < 0.5 {
                let gt = d.depth_flat.data()[i];
                sum += (dg.data()[i] - gt).abs() / gt;
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

const A7_STAGE1_STEPS: usize = 600;
const A7_STAGE2_STEPS: usize = 400;

fn a7_dynamic() -> Outcome {
    let base = small_config();
    let clips: Vec<Clip> = (0..10)
        .map(|s| generate_clip(&SceneSpec::single_mover(700 + s).with_resolution(base.width, base.height), 700 + s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut all = true;
    for seed in 0..3u64 {
        let mut model = Model::new(&base.model_config(), seed).map_err(|e| e.to_string())?;
        let s1 = TrainConfig { stage: 1, steps: A7_STAGE1_STEPS, seed, batch_images: 6, ..base.clone() };
        train_stage(&mut model, &clips, &s1).map_err(|e| e.to_string())?;
        let arm = |flow: f64| -> Result<_, String> {
            let mut m = model.clone();
            let s2 = TrainConfig { stage: 2, steps: A7_STAGE2_STEPS, lambda_flow: flow, peak_lr: base.peak_lr * 0.25, ..s1.clone() };
            train_stage(&mut m, &clips, &s2).map_err(|e| e.to_string())?;
            Ok(evaluate(&m, &clips, &EvalOptions::default()).map_err(|e| e.to_string())?.mean)
        };
        let with = arm(LossWeights::default().flow)?;
        let without = arm(0.0)?;
        let (adv, stat) = (with.advected_dynamic_psnr.unwrap_or(f64::NAN), with.static_dynamic_psnr.unwrap_or(f64::NAN));
        let (ve, ve0) = (with.velocity_error.unwrap_or(f64::NAN), without.velocity_error.unwrap_or(f64::NAN));
        all &= adv > stat && ve < ve0;
        lines.push(format!("seed {seed}: PSNR {adv:.2} vs {stat:.2} dB, velocity error {ve:.4} vs {ve0:.4}"));
    }
    let summary = format!("with flow vs zero velocity / vs no flow loss: {}", lines.join("; "));
    if all {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('A')).collect();
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("A1", a1_gradients),
        ("A2", a2_attention),
        ("A3", a3_velocity),
        ("A4", a4_oracles),
        ("A5", a5_overfit),
        ("A6", a6_distillation),
        ("A7", a7_dynamic),
        ("A8", a8_serialization),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == name) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(msg) => println!("{name} PASS ({:.1}s): {msg}", t0.elapsed().as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("{name} FAIL ({:.1}s): {msg}", t0.elapsed().as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
