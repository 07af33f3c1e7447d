use super::*;
use crate::geometry::{synthesize_track, PixelHomogeneous};
use crate::sim::two_view::{random_two_view_object, TwoViewObject, TwoViewSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn problem_of(obj: &TwoViewObject) -> ReconstructionProblem {
    ReconstructionProblem::new(obj.tracks.clone(), obj.intrinsics, obj.camera_pose).unwrap()
}

fn identity_k() -> CameraIntrinsics {
    CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap()
}

#[test]
fn initial_guess_reproduces_static_point() {
    // The camera moves by +1 m in x, so previous-frame points shift by -1.
    let t = RigidTransform::from_translation(Vec3::new(-1.0, 0.0, 0.0));
    let p = Vec3::new(0.5, 0.0, 5.0);
    let state = DynamicFeatureState::new(p, Vec3::zeros());
    let track = synthesize_track(&identity_k(), &t, &state, 0).unwrap();
    let guess = initial_guess(&track, &identity_k(), &t).unwrap();
    assert!((guess - p).norm() < 1e-12, "{guess}");
}

#[test]
fn initial_guess_matches_closed_form_two_ray_midpoint() {
    // Skew rays: from the origin along (0, 0, 1) and from (1, 1, 0) along
    // (-1, 0, 1)/√2. Closest points are (0, 0, 1) and (0, 1, 1); midpoint
    // (0, 0.5, 1).
    let t = RigidTransform::from_translation(Vec3::new(-1.0, -1.0, 0.0));
    let track = FeatureTrack::new(
        PixelHomogeneous::new(0.0, 0.0),
        PixelHomogeneous::new(-1.0, 0.0),
        0,
    );
    let guess = initial_guess(&track, &identity_k(), &t).unwrap();
    assert!((guess - Vec3::new(0.0, 0.5, 1.0)).norm() < 1e-12, "{guess}");
}

#[test]
fn initial_guess_for_random_static_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut spec = TwoViewSpec::new(8);
    spec.max_translation = 0.0;
    for _ in 0..20 {
        let obj = random_two_view_object(&mut rng, &spec);
        for (track, p) in obj.tracks.iter().zip(&obj.positions) {
            let g = initial_guess(track, &obj.intrinsics, &obj.camera_pose).unwrap();
            assert!((g - p).norm() < 1e-8 * p.norm().max(1.0));
        }
    }
}

#[test]
fn parallel_rays_are_degenerate() {
    // Pure forward motion, on-axis point.
    let t = RigidTransform::from_translation(Vec3::new(0.0, 0.0, -1.0));
    let state = DynamicFeatureState::new(Vec3::new(0.0, 0.0, 5.0), Vec3::zeros());
    let track = synthesize_track(&identity_k(), &t, &state, 0).unwrap();
    assert_eq!(
        initial_guess(&track, &identity_k(), &t),
        Err(ReconstructionError::DegenerateRays)
    );
}

#[test]
fn single_feature_is_underdetermined() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obj = random_two_view_object(&mut rng, &TwoViewSpec::new(1));
    let err = ReconstructionProblem::new(obj.tracks, obj.intrinsics, obj.camera_pose).unwrap_err();
    assert_eq!(err, ReconstructionError::UnderdeterminedObject { count: 1 });
    let err = ReconstructionProblem::new(vec![], obj.intrinsics, obj.camera_pose).unwrap_err();
    assert_eq!(err, ReconstructionError::UnderdeterminedObject { count: 0 });
}

#[test]
fn mixed_object_ids_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut obj = random_two_view_object(&mut rng, &TwoViewSpec::new(3));
    obj.tracks[2].object_id = 7;
    assert!(matches!(
        ReconstructionProblem::new(obj.tracks, obj.intrinsics, obj.camera_pose),
        Err(ReconstructionError::MixedObjects { first: 1, other: 7 })
    ));
}

#[test]
fn static_object_recovers_zero_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut spec = TwoViewSpec::new(5);
    spec.max_translation = 0.0;
    let obj = random_two_view_object(&mut rng, &spec);
    let problem = problem_of(&obj);
    let anchored = SolverOptions::default().with_anchor(DepthAnchor {
        mean_depth: obj.mean_depth(),
        sigma: 0.1,
    });
    let sol = solve(&problem, &anchored).unwrap();
    assert!(sol.translation.norm() < 1e-6, "{}", sol.translation);
    for (track, p) in obj.tracks.iter().zip(&sol.positions) {
        let tri = initial_guess(track, &obj.intrinsics, &obj.camera_pose).unwrap();
        assert!((tri - p).norm() < 1e-6 * p.norm());
    }
}

#[test]
fn moving_object_without_anchor_is_flagged_not_guessed() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let obj = random_two_view_object(&mut rng, &TwoViewSpec::new(5));
    match solve(&problem_of(&obj), &SolverOptions::default()) {
        Err(ReconstructionError::NotConverged { reason, best }) => {
            assert_eq!(reason, NonConvergence::RankDeficient);
            assert!(!best.converged);
        }
        other => panic!("expected rank deficiency, got {other:?}"),
    }
}

#[test]
fn scaled_family_has_zero_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let obj = random_two_view_object(&mut rng, &TwoViewSpec::new(6));
    let problem = problem_of(&obj);
    let c2 = obj.camera_pose.source_center();
    for s in [0.5, 0.8, 1.3, 2.0] {
        let positions: Vec<Vec3> = obj.positions.iter().map(|p| p * s).collect();
        let translation = c2 * (1.0 - s) + obj.translation * s;
        let r = problem
            .residuals(&problem.pack(&positions, &translation))
            .unwrap();
        assert!(r.amax() < 1e-8, "s = {s}: {}", r.amax());
    }
}

#[test]
fn anchored_moving_object_is_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = TwoViewSpec::new(5);
    // Re-draw until the object carries the example translation.
    let mut obj = random_two_view_object(&mut rng, &spec);
    obj.translation = Vec3::new(0.3, 0.0, 0.1);
    obj.tracks = obj
        .positions
        .iter()
        .map(|p| {
            synthesize_track(
                &obj.intrinsics,
                &obj.camera_pose,
                &DynamicFeatureState::new(*p, obj.translation),
                1,
            )
            .unwrap()
        })
        .collect();
    let opts = SolverOptions::default().with_anchor(DepthAnchor {
        mean_depth: obj.mean_depth(),
        sigma: 0.1,
    });
    let sol = solve(&problem_of(&obj), &opts).unwrap();
    assert!(sol.converged);
    for (p, truth) in sol.positions.iter().zip(&obj.positions) {
        assert!((p - truth).norm() / truth.norm() < 1e-6);
    }
    assert!((sol.translation - obj.translation).norm() < 1e-6);
    assert!(sol.cost_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn jacobian_schemes_agree_and_blocks_are_sparse() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obj = random_two_view_object(&mut rng, &TwoViewSpec::new(4));
    let problem = problem_of(&obj);
    // Away from the truth so the residual is non-trivial.
    let positions: Vec<Vec3> = obj.positions.iter().map(|p| p * 1.05).collect();
    let x = problem.pack(&positions, &(obj.translation * 0.5));
    let central = jacobian(&problem, &x).unwrap();
    let forward = forward_jacobian(&problem, &x, 0.5).unwrap();
    let scale = central.amax();
    assert!((&central - &forward).amax() <= 1e-4 * scale);
    for i in 0..problem.len() {
        for other in (0..problem.len()).filter(|&o| o != i) {
            let block = central.view((6 * i, 3 * other), (6, 3));
            assert!(block.iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn gradient_vanishes_at_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let obj = random_two_view_object(&mut rng, &TwoViewSpec::new(5));
    let problem = problem_of(&obj);
    let x = problem.pack(&obj.positions, &obj.translation);
    let g = jacobian(&problem, &x).unwrap().transpose() * problem.residuals(&x).unwrap();
    assert!(g.amax() < 1e-6);
}

#[test]
fn batch_preserves_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let objs: Vec<_> = (0..4)
        .map(|_| random_two_view_object(&mut rng, &TwoViewSpec::new(6)))
        .collect();
    let problems: Vec<_> = objs.iter().map(problem_of).collect();
    let opts = SolverOptions::default();
    let batch = solve_batch(&problems, &opts);
    for (p, r) in problems.iter().zip(batch) {
        assert_eq!(format!("{:?}", solve(p, &opts)), format!("{r:?}"));
    }
}
