use dv4d::geometry::{Camera, Intrinsics, RigidTransform, Z_NEAR};
use dv4d::rasterizer::{project_splat, render_primitives, Primitives, RenderConfig};
use proptest::prelude::*;

#[derive(Clone, Debug)]
struct Scene {
    mu: Vec<f64>,
    log_scale: Vec<f64>,
    quat: Vec<f64>,
    color: Vec<f64>,
    opacity: Vec<f64>,
    velocity: Vec<f64>,
}

impl Scene {
    fn prims(&self, delta: f64) -> Primitives<'_> {
        Primitives {
            mu: &self.mu,
            log_scale: &self.log_scale,
            quat: &self.quat,
            color: &self.color,
            opacity: &self.opacity,
            velocity: &self.velocity,
            delta,
        }
    }
}

fn scene(max: usize) -> impl Strategy<Value = Scene> {
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec((-1.5..1.5f64, -1.0..1.0f64, 2.0..8.0f64), n),
            prop::collection::vec(-3.0..-0.5f64, 3 * n),
            prop::collection::vec(-1.0..1.0f64, 4 * n),
            prop::collection::vec(0.0..1.0f64, 3 * n),
            prop::collection::vec(0.0..0.99f64, n),
            prop::collection::vec(-0.3..0.3f64, 3 * n),
        )
            .prop_map(|(mu, log_scale, mut quat, color, opacity, velocity)| {
                quat.chunks_mut(4).for_each(|q| q[0] += 2.0);
                Scene {
                    mu: mu.into_iter().flat_map(|(x, y, z)| [x, y, z]).collect(),
                    log_scale,
                    quat,
                    color,
                    opacity,
                    velocity,
                }
            })
    })
}

fn camera() -> Camera {
    Camera::new(Intrinsics::from_fov(0.9, 1.1, 24, 20).unwrap(), RigidTransform::identity())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alpha_is_a_fraction(s in scene(12), delta in 0.0..3.0f64) {
        let out = render_primitives(&s.prims(delta), &camera(), &RenderConfig::default());
        for &a in out.alpha.data() {
            prop_assert!((0.0..=1.0).contains(&a), "alpha {a}");
        }
    }

    #[test]
    fn background_fills_the_uncovered_fraction(s in scene(12), bg in prop::array::uniform3(0.0..1.0f64)) {
        let black = render_primitives(&s.prims(0.0), &camera(), &RenderConfig::default());
        let lit = render_primitives(&s.prims(0.0), &camera(), &RenderConfig { background: bg, ..RenderConfig::default() });
        let hw = black.alpha.numel();
        for c in 0..3 {
            for i in 0..hw {
                let expect = black.color.data()[c * hw + i] + (1.0 - black.alpha.data()[i]) * bg[c];
                prop_assert!((lit.color.data()[c * hw + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn footprints_respect_the_low_pass_floor(s in scene(12), delta in 0.0..3.0f64) {
        let cfg = RenderConfig::default();
        let prims = s.prims(delta);
        for i in 0..prims.len() {
            let Some(sp) = project_splat(&prims, i, &camera(), &cfg) else { continue };
            let [a, b, c] = sp.cov;
            let lo = 0.5 * (a + c) - (0.25 * (a - c).powi(2) + b * b).sqrt();
            prop_assert!(lo >= cfg.low_pass - 1e-12, "min eigenvalue {lo}");
            prop_assert!(sp.depth > Z_NEAR);
        }
    }

    #[test]
    fn zero_velocity_renders_are_time_invariant(mut s in scene(8), delta in 0.0..5.0f64) {
        s.velocity.iter_mut().for_each(|v| *v = 0.0);
        let a = render_primitives(&s.prims(0.0), &camera(), &RenderConfig::default());
        let b = render_primitives(&s.prims(delta), &camera(), &RenderConfig::default());
        prop_assert_eq!(a, b);
    }
}
