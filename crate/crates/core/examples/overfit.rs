//! Overfits one synthetic clip: stage 1 then stage 2, then evaluates.
//!
//! `cargo run --release --example overfit -- [stage1_steps] [stage2_steps]`

use std::time::Instant;

use dv4d::harness::{evaluate, train_stage, EvalOptions, Model, TrainConfig};
use dv4d::synth::{generate_clip, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let s1 = args.first().copied().unwrap_or(2000);
    let s2 = args.get(1).copied().unwrap_or(3000);

    let cfg = TrainConfig { steps: s1, log_every: 100, ..TrainConfig::default() };
    let spec = SceneSpec::random(7).with_resolution(cfg.width, cfg.height);
    let clip = generate_clip(&spec, 7)?;
    let mut model = Model::new(&cfg.model_config(), 0)?;
    println!("parameters: {}", model.num_parameters());

    let t0 = Instant::now();
    let trace = train_stage(&mut model, std::slice::from_ref(&clip), &cfg)?;
    if let Some(last) = trace.last() {
        println!("stage 1: {:.1}s, temp {:.2e}, point {:.4}", t0.elapsed().as_secs_f64(), last.losses.temp, last.losses.point_t);
    }

    let cfg2 = TrainConfig { stage: 2, steps: s2, peak_lr: cfg.peak_lr * 0.5, ..cfg };
    let t1 = Instant::now();
    let trace = train_stage(&mut model, std::slice::from_ref(&clip), &cfg2)?;
    if let Some(last) = trace.last() {
        println!("stage 2: {:.1}s, loss {:.4}", t1.elapsed().as_secs_f64(), last.loss);
    }

    let report = evaluate(&model, &[clip], &EvalOptions::default())?;
    println!("{}", report.to_json());
    Ok(())
}
