//! Random single-object two-view scenes with exact ground truth.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::{
    project, CameraIntrinsics, FeatureTrack, PixelHomogeneous, RigidTransform, Vec3,
};

#[derive(Debug, Clone, Copy)]
pub struct TwoViewSpec {
    pub features: usize,
    pub pixel_noise_sigma: f64,
    /// Per-axis bound on the object translation (m); 0 gives a static object.
    pub max_translation: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub intrinsics: CameraIntrinsics,
}

impl TwoViewSpec {
    pub fn new(features: usize) -> Self {
        Self {
            features,
            pixel_noise_sigma: 0.0,
            max_translation: 0.5,
            image_width: 640.0,
            image_height: 480.0,
            intrinsics: CameraIntrinsics::new(460.0, 460.0, 320.0, 240.0)
                .expect("constant intrinsics are valid"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoViewObject {
    pub intrinsics: CameraIntrinsics,
    /// Maps previous-frame points into the current frame.
    pub camera_pose: RigidTransform,
    pub positions: Vec<Vec3>,
    pub translation: Vec3,
    pub tracks: Vec<FeatureTrack>,
}

impl TwoViewObject {
    pub fn mean_depth(&self) -> f64 {
        self.positions.iter().map(|p| p.z).sum::<f64>() / self.positions.len() as f64
    }
}

fn uniform_vec(rng: &mut impl Rng, bound: f64) -> Vec3 {
    if bound == 0.0 {
        return Vec3::zeros();
    }
    Vec3::new(
        rng.random_range(-bound..bound),
        rng.random_range(-bound..bound),
        rng.random_range(-bound..bound),
    )
}

/// Draws a camera motion, an object of `spec.features` points 4–15 m ahead
/// and a translation, retrying until every feature is visible in both frames
/// with noiseless pixels inside the image.
pub fn random_two_view_object(rng: &mut impl Rng, spec: &TwoViewSpec) -> TwoViewObject {
    let k = spec.intrinsics;
    let noise = Normal::new(0.0, spec.pixel_noise_sigma.max(0.0)).expect("sigma is finite");
    loop {
        let axis = uniform_vec(rng, 1.0);
        let angle = rng.random_range(0.0..0.15);
        let motion = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(-1.5..0.5),
        );
        let camera_pose = RigidTransform::from_axis_angle(axis, angle, motion);

        let center = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(4.0..15.0),
        );
        let half = Vec3::new(
            rng.random_range(0.3..1.5),
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.5),
        );
        let positions: Vec<Vec3> = (0..spec.features)
            .map(|_| {
                center
                    + Vec3::new(
                        rng.random_range(-half.x..half.x),
                        rng.random_range(-half.y..half.y),
                        rng.random_range(-half.z..half.z),
                    )
            })
            .collect();
        let translation = uniform_vec(rng, spec.max_translation);

        let mut tracks = Vec::with_capacity(spec.features);
        let mut ok = true;
        for p in &positions {
            let q_curr = camera_pose.apply(&(p + translation));
            let (Ok(a), Ok(b)) = (project(&k, p), project(&k, &q_curr)) else {
                ok = false;
                break;
            };
            let track = FeatureTrack::new(a, b, 1);
            if q_curr.z < 1.0 || !track.in_bounds(spec.image_width, spec.image_height) {
                ok = false;
                break;
            }
            tracks.push(track);
        }
        if !ok {
            continue;
        }
        if spec.pixel_noise_sigma > 0.0 {
            for t in &mut tracks {
                t.prev_pixel = PixelHomogeneous::new(
                    t.prev_pixel.u + noise.sample(rng),
                    t.prev_pixel.v + noise.sample(rng),
                );
                t.curr_pixel = PixelHomogeneous::new(
                    t.curr_pixel.u + noise.sample(rng),
                    t.curr_pixel.v + noise.sample(rng),
                );
            }
        }
        return TwoViewObject {
            intrinsics: k,
            camera_pose,
            positions,
            translation,
            tracks,
        };
    }
}
