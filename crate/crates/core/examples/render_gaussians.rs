//! Renders a handful of moving Gaussians at a few times and writes PNGs.
//!
//! `cargo run --release --example render_gaussians -- [out_dir]`

use std::path::PathBuf;

use dv4d::geometry::{Camera, Intrinsics, RigidTransform};
use dv4d::harness::write_png;
use dv4d::heads::GaussianSet;
use dv4d::numerics::Tensor;
use dv4d::rasterizer::{render, RenderConfig};
use nalgebra::Vector3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("dv4d_render"));
    std::fs::create_dir_all(&out)?;

    let n = 3;
    let gaussians = GaussianSet {
        mu: Tensor::new(&[n, 3], vec![-0.6, 0.0, 4.0, 0.0, 0.0, 5.0, 0.6, 0.2, 4.5])?,
        log_scale: Tensor::full(&[n, 3], (0.25f64).ln()),
        quat: Tensor::new(&[n, 4], vec![1.0, 0.0, 0.0, 0.0, 0.92, 0.0, 0.0, 0.38, 1.0, 0.0, 0.0, 0.0])?,
        color_logit: Tensor::new(&[n, 3], vec![3.0, -2.0, -2.0, -2.0, 3.0, -2.0, -2.0, -2.0, 3.0])?,
        opacity_logit: Tensor::full(&[n], 2.0),
        // only the red one moves, to the right
        velocity: Tensor::new(&[n, 3], vec![0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])?,
        ..GaussianSet::empty(0.0)
    };

    let (w, h) = (96, 64);
    let camera = Camera::new(Intrinsics::from_fov(0.8, 1.1, w, h)?, RigidTransform::identity());
    let cfg = RenderConfig { background: [0.05; 3], ..RenderConfig::default() };

    for t in [0.0, 1.0, 2.0, 3.0] {
        let r = render(&gaussians, &camera, t, &cfg);
        let centre = Vector3::new(-0.6 + 0.3 * t, 0.0, 4.0);
        let (u, v, _) = camera.project_point(&centre).expect("in front");
        println!("t={t}: red center at pixel ({u:.1}, {v:.1}), coverage {:.1}", r.alpha.sum());
        write_png(&r.color, &out.join(format!("t{t}.png")))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
