use mmrefine::reconstruction::{
    solve, DepthAnchor, NonConvergence, ReconstructionError, ReconstructionProblem, SolverOptions,
};
use mmrefine::sim::two_view::{random_two_view_object, TwoViewObject, TwoViewSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem_of(obj: &TwoViewObject) -> ReconstructionProblem {
    ReconstructionProblem::new(obj.tracks.clone(), obj.intrinsics, obj.camera_pose).unwrap()
}

fn anchored(obj: &TwoViewObject) -> SolverOptions {
    SolverOptions::default().with_anchor(DepthAnchor {
        mean_depth: obj.mean_depth(),
        sigma: 0.1,
    })
}

fn max_relative_error(obj: &TwoViewObject, positions: &[nalgebra::Vector3<f64>]) -> f64 {
    positions
        .iter()
        .zip(&obj.positions)
        .map(|(p, t)| (p - t).norm() / t.norm())
        .fold(0.0, f64::max)
}

#[test]
fn anchored_noiseless_recovery_over_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 500;
    let mut exact = 0;
    let mut silent_wrong = 0;
    let mut flagged = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=30);
        let obj = random_two_view_object(&mut rng, &TwoViewSpec::new(n));
        match solve(&problem_of(&obj), &anchored(&obj)) {
            Ok(sol) => {
                let ok = max_relative_error(&obj, &sol.positions) < 1e-6
                    && (sol.translation - obj.translation).norm() < 1e-6;
                if ok {
                    exact += 1;
                } else {
                    silent_wrong += 1;
                }
            }
            Err(ReconstructionError::NotConverged { .. }) => flagged += 1,
            Err(e) => panic!("unexpected error {e}"),
        }
    }
    println!("anchored: exact {exact}/{trials}, flagged {flagged}, silently wrong {silent_wrong}");
    assert!(exact as f64 >= 0.99 * trials as f64);
    assert_eq!(silent_wrong, 0);
}

#[test]
fn unanchored_moving_objects_are_always_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let n = rng.random_range(2..=30);
        let obj = random_two_view_object(&mut rng, &TwoViewSpec::new(n));
        match solve(&problem_of(&obj), &SolverOptions::default()) {
            Err(ReconstructionError::NotConverged {
                reason: NonConvergence::RankDeficient,
                ..
            }) => {}
            Ok(sol) => {
                // Accepting an answer is only allowed when it is the truth.
                assert!(max_relative_error(&obj, &sol.positions) < 1e-6);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn median_error_shrinks_with_feature_count() {
    for sigma in [0.25, 0.5, 1.0] {
        let mut medians = Vec::new();
        for n in [2usize, 5, 10, 20] {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + n as u64);
            let mut spec = TwoViewSpec::new(n);
            spec.pixel_noise_sigma = sigma;
            let errors: Vec<f64> = (0..100)
                .map(|_| {
                    let obj = random_two_view_object(&mut rng, &spec);
                    let sol = match solve(&problem_of(&obj), &anchored(&obj)) {
                        Ok(s) => s,
                        Err(ReconstructionError::NotConverged { best, .. }) => *best,
                        Err(e) => panic!("{e}"),
                    };
                    (sol.translation - obj.translation).norm()
                })
                .collect();
            medians.push(median(errors));
        }
        println!("sigma {sigma}: median Δd error by N = {medians:?}");
        assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
    }
}
