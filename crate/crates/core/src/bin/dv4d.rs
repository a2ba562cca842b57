use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use dv4d::diagnostics::{run_gradcheck, CheckTarget};
use dv4d::geometry::{Camera, Intrinsics, RigidTransform};
use dv4d::harness::{
    evaluate, load_clips, train_stage, write_clip_set, write_png, EvalOptions, Model, TrainConfig,
};
use dv4d::heads::GaussianSet;
use dv4d::numerics::Tensor;
use dv4d::rasterizer::{render, render_backward, RenderConfig, RenderOutput};
use dv4d::synth::{generate_clip, read_clip, SceneSpec};

#[derive(Parser)]
#[command(name = "dv4d", version, about = "Dynamic 4D reconstruction on synthetic driving clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clips into a directory.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        /// Exactly one moving object per clip.
        #[arg(long)]
        single_mover: bool,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// TOML or JSON file with TrainConfig keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        clips: PathBuf,
        /// Model to continue from (required for stage 2 in practice).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate a model on a clip directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Skip similarity alignment of point clouds.
        #[arg(long)]
        no_align: bool,
    },
    /// Write PNGs of a clip, or of a model's Gaussian renders of it.
    Render {
        /// Clip file.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Frames to advance the Gaussians before rendering.
        #[arg(long, default_value_t = 0.0)]
        offset: f64,
    },
    /// Finite-difference gradient checks of one module.
    Gradcheck {
        #[arg(long)]
        module: CheckTarget,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Time a component.
    Bench {
        #[arg(long)]
        rasterizer: bool,
        #[arg(long, default_value_t = 2000)]
        gaussians: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(n) = std::env::var("DV4D_THREADS") {
        let n: usize = n.parse().context("DV4D_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match Cli::parse().command {
        Command::Gen { out, count, seed, width, height, single_mover } => {
            let clips = (0..count as u64)
                .into_par_iter()
                .map(|i| {
                    let s = seed + i;
                    let spec = if single_mover { SceneSpec::single_mover(s) } else { SceneSpec::random(s) };
                    generate_clip(&spec.with_resolution(width, height), s)
                })
                .collect::<Result<Vec<_>, _>>()?;
            write_clip_set(&clips, &out)?;
            println!("wrote {count} clips to {}", out.display());
        }
        Command::Train { stage, config, clips, init, out, trace } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            cfg.stage = stage;
            let clips = load_clips(&clips)?;
            let mut model = match init {
                Some(p) => Model::load(&p)?,
                None => Model::new(&cfg.model_config(), cfg.seed)?,
            };
            let t0 = Instant::now();
            let tr = train_stage(&mut model, &clips, &cfg)?;
            model.save(&out)?;
            if let Some(p) = trace {
                std::fs::write(&p, serde_json::to_string_pretty(&tr)?)?;
            }
            let last = tr.last().map(|s| s.loss).unwrap_or(f64::NAN);
            println!("stage {stage}: {} steps in {:.1}s, final loss {last:.5}", tr.steps.len(), t0.elapsed().as_secs_f64());
        }
        Command::Eval { model, clips, report, no_align } => {
            let model = Model::load(&model)?;
            let clips = load_clips(&clips)?;
            let opts = EvalOptions { align: !no_align, ..EvalOptions::default() };
            let r = evaluate(&model, &clips, &opts)?;
            r.write(&report)?;
            let m = &r.mean;
            println!(
                "{} clips: acc {:.4} comp {:.4} nc {:.3} abs_rel {:.4} psnr {:.2} ssim {:.3}",
                r.clips.len(),
                m.acc_mean,
                m.comp_mean,
                m.nc_mean,
                m.abs_rel,
                m.psnr,
                m.ssim
            );
        }
        Command::Render { scene, out, model, offset } => {
            let clip = read_clip(&scene)?;
            std::fs::create_dir_all(&out)?;
            match model {
                None => {
                    for f in &clip.data {
                        write_png(&f.image, &out.join(format!("v{}_t{}.png", f.view, f.time)))?;
                    }
                }
                Some(m) => {
                    let model = Model::load(&m)?;
                    let sets = model.gaussian_sets(&clip)?;
                    for ((set, cam), f) in sets.iter().zip(&clip.data) {
                        let img = render(set, cam, set.time + offset, &RenderConfig::default());
                        write_png(&img.color, &out.join(format!("v{}_t{}_render.png", f.view, f.time)))?;
                    }
                }
            }
            println!("wrote {} frames to {}", clip.data.len(), out.display());
        }
        Command::Gradcheck { module, seeds } => {
            let mut failed = 0;
            for seed in 0..seeds {
                for (name, r) in run_gradcheck(module, seed)? {
                    let status = if r.passed { "ok" } else { "FAIL" };
                    println!("{status:4} seed {seed} {name}: max rel {:.2e} ({} coords)", r.max_rel_error, r.checked);
                    failed += usize::from(!r.passed);
                }
            }
            if failed > 0 {
                bail!("{failed} checks failed");
            }
        }
        Command::Bench { rasterizer, gaussians, size, iters } => {
            if !rasterizer {
                bail!("nothing to bench; pass --rasterizer");
            }
            bench_rasterizer(gaussians, size, iters)?;
        }
    }
    Ok(())
}

fn bench_rasterizer(n: usize, size: usize, iters: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect())
    };
    let mut mu = t(&[n, 3], -1.0, 1.0)?;
    for i in 0..n {
        let z = 3.0 + 2.0 * (mu.data()[3 * i + 2] + 1.0);
        mu.data_mut()[3 * i + 2] = z;
        mu.data_mut()[3 * i] *= 0.6 * z;
        mu.data_mut()[3 * i + 1] *= 0.6 * z;
    }
    let set = GaussianSet {
        mu,
        log_scale: t(&[n, 3], -3.5, -2.0)?,
        quat: t(&[n, 4], -1.0, 1.0)?,
        color_logit: t(&[n, 3], -2.0, 2.0)?,
        opacity_logit: t(&[n], -1.0, 2.0)?,
        velocity: t(&[n, 3], -0.1, 0.1)?,
        time: 0.0,
        offset: 0.0,
    };
    let cam = Camera::new(Intrinsics::from_fov(1.0, 1.0, size, size)?, RigidTransform::identity());
    let cfg = RenderConfig::default();
    let up = RenderOutput {
        color: t(&[3, size, size], -1.0, 1.0)?,
        depth: t(&[size, size], -1.0, 1.0)?,
        alpha: t(&[size, size], -1.0, 1.0)?,
    };
    let t0 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(render(&set, &cam, 1.0, &cfg));
    }
    let fwd = t0.elapsed().as_secs_f64() / iters as f64;
    let t1 = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(render_backward(&set, &cam, 1.0, &cfg, &up));
    }
    let bwd = t1.elapsed().as_secs_f64() / iters as f64;
    println!(
        "{n} gaussians, {size}x{size}, {} threads: forward {:.2} ms, backward {:.2} ms",
        rayon::current_num_threads(),
        fwd * 1e3,
        bwd * 1e3
    );
    Ok(())
}
