use mmrefine::geometry::{RigidTransform, Vec3};
use mmrefine::motion::{
    ekf_fuse, kabsch, registration_cost, relative_transform, transform_consistency_loss, EkfConfig,
    MotionError, PoseStream,
};
use nalgebra::UnitQuaternion;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

fn random_transform(rng: &mut impl Rng) -> RigidTransform {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let t = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
    RigidTransform::from_axis_angle(Vec3::from(axis), angle, t)
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
        .collect()
}

#[test]
fn kabsch_recovers_random_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = (0.0f64, 0.0f64);
    for trial in 0..1000 {
        let n = 3 + trial % 20;
        let truth = random_transform(&mut rng);
        let src = random_points(&mut rng, n);
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = kabsch(&src, &dst, None).unwrap();
        let (rot, trans) = est.distance(&truth);
        worst = (worst.0.max(rot), worst.1.max(trans));
    }
    assert!(worst.0 < 1e-9 && worst.1 < 1e-9, "{worst:?}");
}

#[test]
fn kabsch_rejects_collinear_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let origin = Vec3::from_fn(|_, _| rng.random_range(-5.0..5.0));
        let dir = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let src: Vec<Vec3> = (0..6)
            .map(|_| origin + dir * rng.random_range(-3.0..3.0))
            .collect();
        let truth = random_transform(&mut rng);
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        assert!(matches!(
            kabsch(&src, &dst, None),
            Err(MotionError::DegenerateConfiguration)
        ));
    }
}

#[test]
fn kabsch_with_noise_beats_perturbed_candidates() {
    // Optimality check: nudging the estimate never lowers the cost.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let noise = Normal::new(0.0, 0.05).unwrap();
    for _ in 0..50 {
        let truth = random_transform(&mut rng);
        let src = random_points(&mut rng, 30);
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| truth.apply(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
            .collect();
        let est = kabsch(&src, &dst, None).unwrap();
        let best = registration_cost(&est, &src, &dst);
        for _ in 0..20 {
            let axis: [f64; 3] = UnitSphere.sample(&mut rng);
            let nudge = RigidTransform::from_axis_angle(
                Vec3::from(axis),
                1e-3,
                Vec3::from_fn(|_, _| rng.random_range(-1e-3..1e-3)),
            );
            assert!(registration_cost(&nudge.compose(&est), &src, &dst) >= best);
        }
    }
}

/// Element-by-element evaluation of the consistency error for one point.
fn consistency_term(reference: &RigidTransform, estimate: &RigidTransform, p: &Vec3) -> f64 {
    let r = reference.rotation();
    let rh = estimate.rotation();
    let mut sq = 0.0;
    for i in 0..3 {
        let mut acc = -p[i];
        for j in 0..3 {
            let mut m = 0.0;
            for k in 0..3 {
                m += r[(k, i)] * rh[(k, j)];
            }
            acc += m * p[j];
        }
        acc += reference.translation()[i] - estimate.translation()[i];
        sq += acc * acc;
    }
    sq.sqrt()
}

#[test]
fn consistency_loss_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let pts = random_points(&mut rng, 50);
        let loss = transform_consistency_loss(&a, &b, &pts).unwrap();
        let oracle = pts.iter().map(|p| consistency_term(&a, &b, p)).sum::<f64>() / 50.0;
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
        assert!(loss > 0.0);
        assert_eq!(transform_consistency_loss(&a, &a, &pts).unwrap(), 0.0);
    }
}

#[test]
fn consistency_loss_vanishes_for_rotation_about_the_points() {
    // Rotation about the line through collinear points acts as the identity
    // on them, so the loss is zero although the transforms differ.
    let axis = Vec3::new(1.0, 2.0, -0.5).normalize();
    let pts: Vec<Vec3> = (0..5).map(|i| axis * i as f64).collect();
    let a = RigidTransform::from_axis_angle(Vec3::y(), 0.3, Vec3::new(1.0, 0.0, 0.0));
    let spin = RigidTransform::from_axis_angle(axis, 0.7, Vec3::zeros());
    let b = RigidTransform::new(a.rotation() * spin.rotation(), *a.translation()).unwrap();
    assert!(transform_consistency_loss(&a, &b, &pts).unwrap() < 1e-12);
    assert!(b.rotation() != a.rotation());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kabsch_cost_is_left_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let src = random_points(&mut rng, 8);
        let t = random_transform(&mut rng);
        let dst: Vec<Vec3> = src
            .iter()
            .map(|p| t.apply(p) + Vec3::from_fn(|_, _| noise.sample(&mut rng)))
            .collect();
        let g = random_transform(&mut rng);
        let gs: Vec<Vec3> = src.iter().map(|p| g.apply(p)).collect();
        let gd: Vec<Vec3> = dst.iter().map(|p| g.apply(p)).collect();
        let c1 = registration_cost(&kabsch(&src, &dst, None).unwrap(), &src, &dst);
        let c2 = registration_cost(&kabsch(&gs, &gd, None).unwrap(), &gs, &gd);
        prop_assert!((c1 - c2).abs() <= 1e-9 * c1.max(1.0));
    }

    #[test]
    fn consistency_loss_is_non_negative(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_transform(&mut rng);
        let b = random_transform(&mut rng);
        let pts = random_points(&mut rng, 5);
        prop_assert!(transform_consistency_loss(&a, &b, &pts).unwrap() >= 0.0);
    }

    #[test]
    fn relative_transforms_chain(a in 0.0f64..9.9, b in 0.0f64..9.9, c in 0.0f64..9.9) {
        let stream = constant_velocity_stream();
        let ab = relative_transform(&stream, a, b).unwrap();
        let bc = relative_transform(&stream, b, c).unwrap();
        let ac = relative_transform(&stream, a, c).unwrap();
        let (rot, trans) = ab.compose(&bc).distance(&ac);
        prop_assert!(rot < 1e-9 && trans < 1e-9);
    }
}

fn constant_velocity_pose(t: f64) -> RigidTransform {
    let q = UnitQuaternion::from_scaled_axis(Vec3::new(0.01, 0.08, -0.02) * t);
    RigidTransform::from_quaternion(q, Vec3::new(5.0 * t, 0.3 * t, -0.1 * t))
}

fn constant_velocity_stream() -> PoseStream {
    PoseStream::new(
        (0..=37)
            .map(|i| i as f64 * 0.27)
            .map(|t| (t, constant_velocity_pose(t)))
            .collect(),
    )
    .unwrap()
}

#[test]
fn interpolation_is_exact_on_constant_velocity() {
    let stream = constant_velocity_stream();
    for t in [0.1, 1.33, 4.05, 9.98] {
        let (rot, trans) = stream
            .pose_at(t)
            .unwrap()
            .distance(&constant_velocity_pose(t));
        assert!(rot < 1e-12 && trans < 1e-12);
    }
}

fn rmse(a: &PoseStream, truth: impl Fn(f64) -> RigidTransform) -> f64 {
    let sum: f64 = a
        .samples()
        .iter()
        .map(|(t, p)| (p.translation() - truth(*t).translation()).norm_squared())
        .sum();
    (sum / a.len() as f64).sqrt()
}

fn figure_eight(t: f64) -> RigidTransform {
    let w = 2.0 * std::f64::consts::PI / 30.0;
    let position = Vec3::new(20.0 * (w * t).sin(), 10.0 * (2.0 * w * t).sin(), 0.5 * t);
    let heading = UnitQuaternion::from_scaled_axis(Vec3::new(0.0, 0.2 * (w * t).cos(), 0.0));
    RigidTransform::from_quaternion(heading, position)
}

#[test]
fn fusion_beats_drift_and_tracks_noise_level() {
    let drift = Vec3::new(0.1, 0.0, 0.0);
    let (mut fused_sum, mut vi_sum, mut inertial_sum) = (0.0, 0.0, 0.0);
    let mut violations = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let vi = PoseStream::new(
            (0..=600)
                .map(|i| i as f64 * 0.1)
                .map(|t| {
                    let p = figure_eight(t);
                    let jitter = Vec3::from_fn(|_, _| noise.sample(&mut rng));
                    (
                        t,
                        RigidTransform::new(*p.rotation(), p.translation() + jitter).unwrap(),
                    )
                })
                .collect(),
        )
        .unwrap();
        let drifting = |t: f64| {
            let p = figure_eight(t);
            RigidTransform::new(*p.rotation(), p.translation() + drift * t).unwrap()
        };
        let inertial = PoseStream::new(
            (0..=6000)
                .map(|i| i as f64 * 0.01)
                .map(|t| (t, drifting(t)))
                .collect(),
        )
        .unwrap();
        let fused = ekf_fuse(&vi, &inertial, &EkfConfig::default()).unwrap();
        let f = rmse(&fused.poses, figure_eight);
        let v = rmse(&vi, figure_eight);
        let d = rmse(&inertial, figure_eight);
        if !(f < d && f <= 1.5 * v) {
            violations += 1;
        }
        fused_sum += f;
        vi_sum += v;
        inertial_sum += d;
        for (prior, post) in fused.prior_trace.iter().zip(&fused.posterior_trace) {
            assert!(post <= prior);
        }
    }
    println!(
        "mean RMSE fused {:.4} m, noisy stream {:.4} m, drifting stream {:.4} m",
        fused_sum / 100.0,
        vi_sum / 100.0,
        inertial_sum / 100.0
    );
    assert_eq!(violations, 0);
}

#[test]
fn fusion_is_deterministic() {
    let vi = constant_velocity_stream();
    let inertial = PoseStream::new(
        (0..=100)
            .map(|i| i as f64 * 0.0999)
            .map(|t| {
                (
                    t,
                    constant_velocity_pose(t).compose(&RigidTransform::from_translation(
                        Vec3::new(0.01 * t, 0.0, 0.0),
                    )),
                )
            })
            .collect(),
    )
    .unwrap();
    let a = ekf_fuse(&vi, &inertial, &EkfConfig::default()).unwrap();
    let b = ekf_fuse(&vi, &inertial, &EkfConfig::default()).unwrap();
    assert_eq!(a.poses, b.poses);
}
