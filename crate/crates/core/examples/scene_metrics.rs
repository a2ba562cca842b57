//! Reconstruction metrics against a perturbed copy of the ground truth.

use dv4d::metrics::{accuracy_completeness, depth_metrics, image_metrics, normal_consistency, umeyama_align};
use dv4d::numerics::Tensor;
use dv4d::synth::{generate_clip, SceneSpec};
use nalgebra::{UnitQuaternion, Vector3};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clip = generate_clip(&SceneSpec::random(11).with_resolution(48, 32), 11)?;
    let f = clip.frame(0, 0);
    let gt = f.point_map().valid_points();

    // a similarity-transformed, slightly noisy reconstruction
    let rot = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3);
    let pred: Vec<Vector3<f64>> = gt
        .iter()
        .enumerate()
        .map(|(i, p)| 0.5 * (rot * p) + Vector3::new(1.0, 0.0, -2.0) + Vector3::repeat(0.002 * ((i % 7) as f64 - 3.0)))
        .collect();

    let sim = umeyama_align(&pred, &gt, true)?;
    let aligned: Vec<_> = pred.iter().map(|p| sim.apply(p)).collect();
    let ac = accuracy_completeness(&aligned, &gt)?;
    let (nc_mean, nc_median) = normal_consistency(&aligned, &gt, None, None)?;
    println!("scale {:.4}", sim.scale);
    println!("acc {:.4} / {:.4}  comp {:.4} / {:.4}", ac.acc_mean, ac.acc_median, ac.comp_mean, ac.comp_median);
    println!("normal consistency {nc_mean:.4} / {nc_median:.4}");

    let mask = Tensor::new(f.depth.shape(), f.valid.iter().map(|&v| f64::from(u8::from(v))).collect())?;
    let dm = depth_metrics(&f.depth.scale(1.7), &f.depth, &mask, true)?;
    println!("depth x1.7 with median scaling: abs_rel {:.2e}, delta<1.25 {:.3}", dm.abs_rel, dm.delta_125);

    let noisy = f.image.map(|x| (x + 0.02).min(1.0));
    let im = image_metrics(&noisy, &f.image, None)?;
    println!("image +0.02: psnr {:.2} dB, ssim {:.4}", im.psnr, im.ssim);
    Ok(())
}
