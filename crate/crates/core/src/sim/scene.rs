//! Full driving-scene generator: ego trajectory, static structures, moving
//! rigid objects, radar clouds with multipath ghosts, camera feature tracks,
//! scene flow, two pose streams and range–Doppler matrices.
//!
//! The world frame uses the camera axis convention (x right, y down,
//! z forward). Camera and radar share the body frame.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::cfar::{AngleMap, RangeDopplerMatrix};
use crate::geometry::{
    project, CameraIntrinsics, FeatureTrack, PixelHomogeneous, RigidTransform, Vec3,
};
use crate::motion::{PoseStream, ScenePointSet};
use crate::spurious::{PointCloudFrame, PointLabel};

/// Moving probability reported for points the flow network deems static.
const STATIC_PROB: f64 = 0.1;
/// Moving probability reported for points the flow network deems moving.
const MOVING_PROB: f64 = 0.9;
/// Nearest depth at which a point is observed.
const MIN_DEPTH: f64 = 0.5;
/// Step of the finite difference used for radial velocities (s).
const VELOCITY_STEP: f64 = 1e-4;

// Purposes of derived random streams.
const STREAM_SHAPES: u64 = 1;
const STREAM_RADAR: u64 = 2;
const STREAM_TRACKS: u64 = 3;
const STREAM_FLOW: u64 = 4;
const STREAM_POSES: u64 = 5;
const STREAM_RDM: u64 = 6;

/// ChaCha8 generator for one purpose and index derived from the scene seed.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shape {
    /// Points sampled uniformly over the surface of an axis-aligned box.
    Box { size: [f64; 3], points: usize },
    /// Points sampled uniformly over a sphere.
    Sphere { radius: f64, points: usize },
}

impl Shape {
    fn points(&self) -> usize {
        match self {
            Shape::Box { points, .. } | Shape::Sphere { points, .. } => *points,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok = match self {
            Shape::Box { size, .. } => size.iter().all(|s| *s > 0.0 && s.is_finite()),
            Shape::Sphere { radius, .. } => *radius > 0.0 && radius.is_finite(),
        };
        if !ok || self.points() == 0 {
            return Err(SimError::InvalidConfig(format!(
                "degenerate shape {self:?}"
            )));
        }
        Ok(())
    }

    /// Surface samples relative to the shape centre.
    fn sample(&self, rng: &mut impl Rng) -> Vec<Vec3> {
        match self {
            Shape::Box { size, points } => {
                let [a, b, c] = *size;
                let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
                let total: f64 = areas.iter().sum();
                (0..*points)
                    .map(|_| {
                        let mut pick = rng.random_range(0.0..total);
                        let mut face = 0;
                        while face < 5 && pick >= areas[face] {
                            pick -= areas[face];
                            face += 1;
                        }
                        let u = rng.random_range(-0.5..0.5);
                        let v = rng.random_range(-0.5..0.5);
                        let side = if face % 2 == 0 { -0.5 } else { 0.5 };
                        match face / 2 {
                            0 => Vec3::new(side * a, u * b, v * c),
                            1 => Vec3::new(u * a, side * b, v * c),
                            _ => Vec3::new(u * a, v * b, side * c),
                        }
                    })
                    .collect()
            }
            Shape::Sphere { radius, points } => (0..*points)
                .map(|_| {
                    let dir: [f64; 3] = rand_distr::UnitSphere.sample(rng);
                    Vec3::from(dir) * *radius
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// World position of the centre at time 0.
    pub position: [f64; 3],
    /// World velocity (m/s); objects translate without rotating.
    #[serde(default)]
    pub velocity: [f64; 3],
}

/// Plane `normal · x = offset` in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reflector {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Reflector {
    fn unit(&self) -> (Vec3, f64) {
        let n = Vec3::from(self.normal);
        let norm = n.norm();
        (n / norm, self.offset / norm)
    }

    /// Mirror image of `p` about the plane.
    pub fn reflect(&self, p: &Vec3) -> Vec3 {
        let (n, d) = self.unit();
        p - n * (2.0 * (n.dot(p) - d))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub time: f64,
    pub position: [f64; 3],
    /// Heading about the world y axis (rad).
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trajectory {
    ConstantVelocity {
        start: [f64; 3],
        velocity: [f64; 3],
        #[serde(default)]
        yaw_rate: f64,
    },
    /// Piecewise-linear position and heading, held constant outside the
    /// listed times.
    Waypoints { waypoints: Vec<Waypoint> },
}

impl Trajectory {
    /// Body-to-world pose at time `t`.
    pub fn pose(&self, t: f64) -> RigidTransform {
        let (position, yaw) = match self {
            Trajectory::ConstantVelocity {
                start,
                velocity,
                yaw_rate,
            } => (Vec3::from(*start) + Vec3::from(*velocity) * t, yaw_rate * t),
            Trajectory::Waypoints { waypoints } => {
                let i = waypoints.partition_point(|w| w.time < t);
                if i == 0 {
                    (Vec3::from(waypoints[0].position), waypoints[0].yaw)
                } else if i == waypoints.len() {
                    let w = waypoints[i - 1];
                    (Vec3::from(w.position), w.yaw)
                } else {
                    let (a, b) = (waypoints[i - 1], waypoints[i]);
                    let s = (t - a.time) / (b.time - a.time);
                    (
                        Vec3::from(a.position).lerp(&Vec3::from(b.position), s),
                        a.yaw + s * (b.yaw - a.yaw),
                    )
                }
            }
        };
        RigidTransform::from_rotation(Rotation3::from_axis_angle(&Vec3::y_axis(), yaw), position)
    }

    fn validate(&self) -> Result<(), SimError> {
        if let Trajectory::Waypoints { waypoints } = self {
            if waypoints.is_empty() {
                return Err(SimError::InvalidConfig(
                    "trajectory has no waypoints".into(),
                ));
            }
            if waypoints.windows(2).any(|w| !(w[1].time > w[0].time)) {
                return Err(SimError::InvalidConfig(
                    "waypoint times must increase".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            fx: 460.0,
            fy: 460.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarSpec {
    /// Probability that a visible surface point returns in a frame.
    pub detection_prob: f64,
    /// Per-axis Gaussian position noise of real returns (m).
    pub noise_sigma: f64,
    pub max_range: f64,
    pub azimuth_fov_deg: f64,
    pub elevation_fov_deg: f64,
    pub range_res: f64,
    pub doppler_res: f64,
    pub range_bins: usize,
    pub doppler_bins: usize,
    /// Mean of the exponential noise floor (linear power).
    pub noise_power: f64,
    /// Target SNRs are drawn uniformly from this interval (dB).
    pub snr_db: [f64; 2],
    /// Whether range–Doppler matrices are synthesized.
    pub rdm: bool,
}

impl Default for RadarSpec {
    fn default() -> Self {
        Self {
            detection_prob: 0.3,
            noise_sigma: 0.03,
            max_range: 50.0,
            azimuth_fov_deg: 120.0,
            elevation_fov_deg: 40.0,
            range_res: 0.25,
            doppler_res: 0.5,
            range_bins: 256,
            doppler_bins: 64,
            noise_power: 1.0,
            snr_db: [15.0, 30.0],
            rdm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub duration: f64,
    pub frame_rate: f64,
    pub trajectory: Trajectory,
    pub background: Vec<ObjectSpec>,
    pub objects: Vec<ObjectSpec>,
    pub reflectors: Vec<Reflector>,
    pub pixel_noise_sigma: f64,
    pub flow_noise_sigma: f64,
    pub label_flip_prob: f64,
    /// Mirror points per real radar point.
    pub spurious_fraction: f64,
    /// Probability that a mirror point survives into the next frame.
    pub mirror_persistence: f64,
    pub features_per_object: usize,
    pub background_features: usize,
    pub camera: CameraSpec,
    pub radar: RadarSpec,
    /// Per-axis position noise of the visual-inertial pose stream (m).
    pub vi_position_sigma: f64,
    /// Rotation noise of the visual-inertial pose stream (rad).
    pub vi_rotation_sigma: f64,
    pub inertial_rate: f64,
    /// Linear drift velocity of the inertial pose stream (m/s, world).
    pub inertial_drift: [f64; 3],
}

fn car(x: f64, z: f64, velocity: [f64; 3]) -> ObjectSpec {
    ObjectSpec {
        shape: Shape::Box {
            size: [1.8, 1.5, 4.5],
            points: 160,
        },
        position: [x, 0.75, z],
        velocity,
    }
}

fn wall(x: f64) -> ObjectSpec {
    ObjectSpec {
        shape: Shape::Box {
            size: [0.4, 4.0, 90.0],
            points: 1500,
        },
        position: [x, -0.5, 40.0],
        velocity: [0.0; 3],
    }
}

fn pole(x: f64, z: f64) -> ObjectSpec {
    ObjectSpec {
        shape: Shape::Box {
            size: [0.3, 3.0, 0.3],
            points: 40,
        },
        position: [x, 0.0, z],
        velocity: [0.0; 3],
    }
}

impl Default for SceneConfig {
    /// A straight street between two walls with parked cars, poles and
    /// three moving cars.
    fn default() -> Self {
        Self {
            seed: 7,
            duration: 3.0,
            frame_rate: 10.0,
            trajectory: Trajectory::ConstantVelocity {
                start: [0.0, 0.0, 0.0],
                velocity: [0.0, 0.0, 8.0],
                yaw_rate: 0.02,
            },
            background: vec![
                wall(-7.0),
                wall(7.0),
                pole(-5.0, 15.0),
                pole(5.0, 25.0),
                pole(-5.0, 35.0),
                pole(5.0, 45.0),
                car(-4.5, 22.0, [0.0; 3]),
                car(4.5, 40.0, [0.0; 3]),
            ],
            objects: vec![
                car(2.0, 14.0, [0.0, 0.0, 12.0]),
                car(-2.0, 55.0, [0.0, 0.0, -8.0]),
                car(-3.0, 30.0, [1.5, 0.0, 4.0]),
            ],
            reflectors: vec![
                Reflector {
                    normal: [1.0, 0.0, 0.0],
                    offset: -6.8,
                },
                Reflector {
                    normal: [1.0, 0.0, 0.0],
                    offset: 6.8,
                },
                Reflector {
                    normal: [0.0, 1.0, 0.0],
                    offset: 1.5,
                },
            ],
            pixel_noise_sigma: 0.5,
            flow_noise_sigma: 0.05,
            label_flip_prob: 0.02,
            spurious_fraction: 0.1,
            mirror_persistence: 0.2,
            features_per_object: 40,
            background_features: 120,
            camera: CameraSpec::default(),
            radar: RadarSpec::default(),
            vi_position_sigma: 0.02,
            vi_rotation_sigma: 0.002,
            inertial_rate: 100.0,
            inertial_drift: [0.1, 0.0, 0.0],
        }
    }
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| SimError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SimError> {
        let c = &self.camera;
        CameraIntrinsics::new(c.fx, c.fy, c.cx, c.cy)
            .map_err(|e| SimError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive");
        }
        if !(self.duration >= 2.0 / self.frame_rate) {
            return bad("duration must cover at least two frame intervals");
        }
        let probs = [
            self.label_flip_prob,
            self.spurious_fraction,
            self.mirror_persistence,
            self.radar.detection_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities and fractions must lie in [0, 1]");
        }
        let sigmas = [
            self.pixel_noise_sigma,
            self.flow_noise_sigma,
            self.radar.noise_sigma,
            self.vi_position_sigma,
            self.vi_rotation_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise levels must be non-negative");
        }
        if !(self.inertial_rate > 0.0) {
            return bad("inertial_rate must be positive");
        }
        let r = &self.radar;
        if r.range_bins < crate::cfar::MIN_BINS || r.doppler_bins < crate::cfar::MIN_BINS {
            return bad("radar matrices need at least 8 bins per axis");
        }
        if !(r.range_res > 0.0
            && r.doppler_res > 0.0
            && r.noise_power > 0.0
            && r.max_range > MIN_DEPTH)
        {
            return bad("radar resolutions, noise power and range must be positive");
        }
        if !(r.snr_db[0] <= r.snr_db[1]) {
            return bad("radar snr_db must be an increasing interval");
        }
        if self.spurious_fraction > 0.0 && self.reflectors.is_empty() {
            return bad("mirror points need at least one reflector");
        }
        for r in &self.reflectors {
            if !(Vec3::from(r.normal).norm() > 0.0) {
                return bad("reflector normal must be non-zero");
            }
        }
        self.intrinsics()?;
        self.trajectory.validate()?;
        for spec in self.background.iter().chain(&self.objects) {
            spec.shape.validate()?;
        }
        Ok(())
    }

    /// Frame timestamps `k / frame_rate` for every frame within the duration.
    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration * self.frame_rate + 1e-9).floor() as usize + 1;
        (0..n).map(|k| k as f64 / self.frame_rate).collect()
    }
}

/// Origin of a radar point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    /// Return from surface point `source`.
    Real { source: usize },
    /// Multipath image of surface point `source` about reflector
    /// `reflector`; `source_position` is the true source in body
    /// coordinates.
    Mirror {
        source: usize,
        reflector: usize,
        source_position: Vec3,
    },
}

impl Provenance {
    pub fn is_mirror(&self) -> bool {
        matches!(self, Provenance::Mirror { .. })
    }
}

/// What the sensors report for one frame pair `k−1 → k`.
#[derive(Debug, Clone)]
pub struct PairObservation {
    pub tracks: Vec<FeatureTrack>,
    /// Radar points of frame `k−1` with their flow into frame `k`.
    pub flow: Option<ScenePointSet>,
}

#[derive(Debug, Clone)]
pub struct Observations {
    pub intrinsics: CameraIntrinsics,
    pub image_size: (f64, f64),
    pub timestamps: Vec<f64>,
    pub clouds: Vec<PointCloudFrame>,
    /// `pairs[k-1]` covers frames `k−1 → k`.
    pub pairs: Vec<PairObservation>,
    pub vi_poses: PoseStream,
    pub inertial_poses: PoseStream,
    /// One matrix per frame when enabled.
    pub rdms: Vec<RangeDopplerMatrix>,
    pub objects: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTruth {
    /// Maps frame-`k−1` body coordinates into frame `k`.
    pub camera_pose: RigidTransform,
    /// True previous-frame position of every track, in track order.
    pub features: Vec<Vec3>,
    /// Object translation between the frames in frame-`k−1` coordinates.
    pub translations: BTreeMap<u32, Vec3>,
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Body-to-world poses at the inertial rate.
    pub poses: PoseStream,
    pub frame_poses: Vec<RigidTransform>,
    /// Visible surface points per frame, body coordinates.
    pub clouds: Vec<Vec<Vec3>>,
    pub cloud_labels: Vec<Vec<PointLabel>>,
    /// One record per radar point, aligned with the observed clouds.
    pub provenance: Vec<Vec<Provenance>>,
    pub pairs: Vec<PairTruth>,
    pub reflectors: Vec<Reflector>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub observations: Observations,
    pub truth: GroundTruth,
}

/// A surface sample of the world with its owner.
struct SurfacePoint {
    offset: Vec3,
    centre: Vec3,
    velocity: Vec3,
    label: PointLabel,
}

impl SurfacePoint {
    fn at(&self, t: f64) -> Vec3 {
        self.centre + self.offset + self.velocity * t
    }
}

struct World<'a> {
    cfg: &'a SceneConfig,
    points: Vec<SurfacePoint>,
}

impl World<'_> {
    fn pose(&self, t: f64) -> RigidTransform {
        self.cfg.trajectory.pose(t)
    }

    fn radar_visible(&self, p: &Vec3) -> bool {
        let r = &self.cfg.radar;
        let range = p.norm();
        if !(p.z > MIN_DEPTH && range <= r.max_range) {
            return false;
        }
        let az = p.x.atan2(p.z).abs();
        let el = (-p.y).atan2(p.x.hypot(p.z)).abs();
        az <= 0.5 * r.azimuth_fov_deg.to_radians() && el <= 0.5 * r.elevation_fov_deg.to_radians()
    }

    fn mirror_world(&self, source: usize, reflector: usize, t: f64) -> Vec3 {
        self.cfg.reflectors[reflector].reflect(&self.points[source].at(t))
    }
}

fn build_world(cfg: &SceneConfig) -> World<'_> {
    let mut points = Vec::new();
    let specs = cfg
        .background
        .iter()
        .map(|s| (s, PointLabel::Background))
        .chain(
            cfg.objects
                .iter()
                .enumerate()
                .map(|(j, s)| (s, PointLabel::Dynamic(j as u32 + 1))),
        );
    for (index, (spec, label)) in specs.enumerate() {
        let mut rng = derived_rng(cfg.seed, STREAM_SHAPES, index as u64);
        let velocity = match label {
            PointLabel::Background => Vec3::zeros(),
            _ => Vec3::from(spec.velocity),
        };
        for offset in spec.shape.sample(&mut rng) {
            points.push(SurfacePoint {
                offset,
                centre: Vec3::from(spec.position),
                velocity,
                label,
            });
        }
    }
    World { cfg, points }
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated")
}

fn jitter(rng: &mut impl Rng, sigma: f64) -> Vec3 {
    if sigma == 0.0 {
        return Vec3::zeros();
    }
    let n = gaussian(sigma);
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

struct FrameRecord {
    cloud: PointCloudFrame,
    provenance: Vec<Provenance>,
    truth: Vec<Vec3>,
    truth_labels: Vec<PointLabel>,
}

fn generate_frame(
    world: &World<'_>,
    k: usize,
    t: f64,
    previous: Option<&[Provenance]>,
) -> Result<FrameRecord, SimError> {
    let cfg = world.cfg;
    let pose_inv = world.pose(t).inverse();
    let mut rng = derived_rng(cfg.seed, STREAM_RADAR, k as u64);

    let mut truth = Vec::new();
    let mut truth_labels = Vec::new();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    for (g, sp) in world.points.iter().enumerate() {
        let body = pose_inv.apply(&sp.at(t));
        if !world.radar_visible(&body) {
            continue;
        }
        truth.push(body);
        truth_labels.push(sp.label);
        if rng.random::<f64>() < cfg.radar.detection_prob {
            points.push(body + jitter(&mut rng, cfg.radar.noise_sigma));
            labels.push(sp.label);
            provenance.push(Provenance::Real { source: g });
        }
    }

    let real = points.len();
    let target = (cfg.spurious_fraction * real as f64).round() as usize;
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    if let Some(prev) = previous {
        for p in prev {
            if let Provenance::Mirror {
                source, reflector, ..
            } = *p
            {
                if rng.random::<f64>() < cfg.mirror_persistence {
                    candidates.push((source, reflector));
                }
            }
        }
    }
    let mut emitted = 0;
    let mut attempts = 0;
    let mut persisted = candidates.into_iter();
    while emitted < target && attempts < 20 * target {
        let (source, reflector) = match persisted.next() {
            Some(c) => c,
            None => {
                attempts += 1;
                let Provenance::Real { source } = provenance[rng.random_range(0..real)] else {
                    unreachable!("real returns come first");
                };
                (source, rng.random_range(0..cfg.reflectors.len()))
            }
        };
        let body = pose_inv.apply(&world.mirror_world(source, reflector, t));
        if !world.radar_visible(&body) {
            continue;
        }
        let source_position = pose_inv.apply(&world.points[source].at(t));
        points.push(body);
        labels.push(world.points[source].label);
        provenance.push(Provenance::Mirror {
            source,
            reflector,
            source_position,
        });
        emitted += 1;
    }
    let cloud = PointCloudFrame::new(t, points, labels, cfg.objects.len() as u32)?;
    Ok(FrameRecord {
        cloud,
        provenance,
        truth,
        truth_labels,
    })
}

fn visible_in_camera(
    cfg: &SceneConfig,
    k: &CameraIntrinsics,
    p: &Vec3,
) -> Option<PixelHomogeneous> {
    if p.z <= MIN_DEPTH {
        return None;
    }
    let px = project(k, p).ok()?;
    (px.u >= 0.0 && px.u < cfg.camera.width && px.v >= 0.0 && px.v < cfg.camera.height)
        .then_some(px)
}

fn generate_pair(
    world: &World<'_>,
    k: usize,
    times: &[f64],
    clouds: &[FrameRecord],
    intrinsics: &CameraIntrinsics,
) -> (PairObservation, PairTruth) {
    let cfg = world.cfg;
    let (t0, t1) = (times[k - 1], times[k]);
    let (pose0, pose1) = (world.pose(t0), world.pose(t1));
    let camera_pose = pose1.inverse().compose(&pose0);
    let to_prev = pose0.inverse();
    let mut rng = derived_rng(cfg.seed, STREAM_TRACKS, k as u64);
    let pixel = gaussian(cfg.pixel_noise_sigma.max(f64::MIN_POSITIVE));

    let translations: BTreeMap<u32, Vec3> = cfg
        .objects
        .iter()
        .enumerate()
        .map(|(j, o)| {
            (
                j as u32 + 1,
                to_prev.rotate(&(Vec3::from(o.velocity) * (t1 - t0))),
            )
        })
        .collect();

    // Candidate features grouped by owner, in surface order.
    let mut by_owner: BTreeMap<u32, Vec<(Vec3, PixelHomogeneous, PixelHomogeneous)>> =
        BTreeMap::new();
    for sp in &world.points {
        let owner = match sp.label {
            PointLabel::Dynamic(j) => j,
            _ => 0,
        };
        let p = to_prev.apply(&sp.at(t0));
        let dd = translations
            .get(&owner)
            .copied()
            .unwrap_or_else(Vec3::zeros);
        let q = camera_pose.apply(&(p + dd));
        if let (Some(a), Some(b)) = (
            visible_in_camera(cfg, intrinsics, &p),
            visible_in_camera(cfg, intrinsics, &q),
        ) {
            by_owner.entry(owner).or_default().push((p, a, b));
        }
    }
    let mut tracks = Vec::new();
    let mut features = Vec::new();
    for (owner, mut candidates) in by_owner {
        let quota = if owner == 0 {
            cfg.background_features
        } else {
            cfg.features_per_object
        };
        candidates.shuffle(&mut rng);
        for (p, a, b) in candidates.into_iter().take(quota) {
            let noisy = |px: PixelHomogeneous, rng: &mut ChaCha8Rng| {
                if cfg.pixel_noise_sigma == 0.0 {
                    px
                } else {
                    PixelHomogeneous::new(px.u + pixel.sample(rng), px.v + pixel.sample(rng))
                }
            };
            let a = noisy(a, &mut rng);
            let b = noisy(b, &mut rng);
            tracks.push(FeatureTrack::new(a, b, owner));
            features.push(p);
        }
    }

    let flow = scene_flow(world, k, times, &clouds[k - 1], &clouds[k], &camera_pose);
    (
        PairObservation { tracks, flow },
        PairTruth {
            camera_pose,
            features,
            translations,
        },
    )
}

fn scene_flow(
    world: &World<'_>,
    k: usize,
    times: &[f64],
    prev: &FrameRecord,
    curr: &FrameRecord,
    camera_pose: &RigidTransform,
) -> Option<ScenePointSet> {
    let cfg = world.cfg;
    if prev.cloud.is_empty() {
        return None;
    }
    let t1 = times[k];
    let to_curr = world.pose(t1).inverse();
    let mut rng = derived_rng(cfg.seed, STREAM_FLOW, k as u64);
    let mut flow = Vec::with_capacity(prev.cloud.len());
    let mut moving = Vec::with_capacity(prev.cloud.len());
    for (p, prov) in prev.cloud.points().iter().zip(&prev.provenance) {
        let (next, mut prob) = match *prov {
            Provenance::Real { source } => {
                let sp = &world.points[source];
                let m = if sp.velocity.norm() > 0.0 {
                    MOVING_PROB
                } else {
                    STATIC_PROB
                };
                (to_curr.apply(&sp.at(t1)), m)
            }
            Provenance::Mirror {
                source, reflector, ..
            } => {
                let persisted = curr.provenance.iter().any(|c| {
                    matches!(*c, Provenance::Mirror { source: s, reflector: r, .. } if s == source && r == reflector)
                });
                if persisted {
                    let m = if world.points[source].velocity.norm() > 0.0 {
                        MOVING_PROB
                    } else {
                        STATIC_PROB
                    };
                    (to_curr.apply(&world.mirror_world(source, reflector, t1)), m)
                } else {
                    // A vanished ghost gets an arbitrary match.
                    (
                        camera_pose.apply(p) + jitter(&mut rng, 0.5),
                        rng.random_range(0.0..1.0),
                    )
                }
            }
        };
        if rng.random::<f64>() < cfg.label_flip_prob {
            prob = 1.0 - prob;
        }
        flow.push(next - p + jitter(&mut rng, cfg.flow_noise_sigma));
        moving.push(prob);
    }
    ScenePointSet::new(prev.cloud.points().to_vec(), flow, moving).ok()
}

fn pose_streams(
    cfg: &SceneConfig,
    times: &[f64],
) -> Result<(PoseStream, PoseStream, PoseStream), SimError> {
    let last = *times.last().expect("at least two frames");
    let n = (last * cfg.inertial_rate - 1e-9).ceil() as usize;
    let dense: Vec<f64> = (0..=n).map(|i| i as f64 / cfg.inertial_rate).collect();
    let drift = Vec3::from(cfg.inertial_drift);
    let truth = PoseStream::new(dense.iter().map(|&t| (t, cfg.trajectory.pose(t))).collect())?;
    let inertial = PoseStream::new(
        dense
            .iter()
            .map(|&t| {
                let p = cfg.trajectory.pose(t);
                (
                    t,
                    RigidTransform::new(*p.rotation(), p.translation() + drift * t)
                        .expect("rotation from a pose"),
                )
            })
            .collect(),
    )?;
    let mut rng = derived_rng(cfg.seed, STREAM_POSES, 0);
    let vi = PoseStream::new(
        times
            .iter()
            .map(|&t| {
                let p = cfg.trajectory.pose(t);
                let spin =
                    UnitQuaternion::from_scaled_axis(jitter(&mut rng, cfg.vi_rotation_sigma));
                let translation = p.translation() + jitter(&mut rng, cfg.vi_position_sigma);
                (
                    t,
                    RigidTransform::from_quaternion(p.quaternion() * spin, translation),
                )
            })
            .collect(),
    )?;
    Ok((truth, vi, inertial))
}

/// Radar-frame coordinates (x right, y forward, z up) of a body point.
pub fn body_to_radar(p: &Vec3) -> Vec3 {
    Vec3::new(p.x, p.z, -p.y)
}

/// Body coordinates of a radar-frame point.
pub fn radar_to_body(p: &Vec3) -> Vec3 {
    Vec3::new(p.x, -p.z, p.y)
}

fn synthesize_rdm(
    world: &World<'_>,
    k: usize,
    t: f64,
    record: &FrameRecord,
) -> Result<RangeDopplerMatrix, SimError> {
    let cfg = world.cfg;
    let r = &cfg.radar;
    let mut rng = derived_rng(cfg.seed, STREAM_RDM, k as u64);
    let (rows, cols) = (r.range_bins, r.doppler_bins);
    let mut power = DMatrix::from_fn(rows, cols, |_, _| {
        let e: f64 = Exp1.sample(&mut rng);
        e * r.noise_power
    });
    let half_az = 0.5 * r.azimuth_fov_deg.to_radians();
    let half_el = 0.5 * r.elevation_fov_deg.to_radians();
    let mut azimuth = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-half_az..=half_az));
    let mut elevation = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-half_el..=half_el));
    let mut strongest = DMatrix::<f64>::zeros(rows, cols);

    let inv_now = world.pose(t).inverse();
    let inv_next = world.pose(t + VELOCITY_STEP).inverse();
    for (p, prov) in record.cloud.points().iter().zip(&record.provenance) {
        let (now, next) = match *prov {
            Provenance::Real { source } => {
                let sp = &world.points[source];
                (
                    inv_now.apply(&sp.at(t)),
                    inv_next.apply(&sp.at(t + VELOCITY_STEP)),
                )
            }
            Provenance::Mirror {
                source, reflector, ..
            } => (
                inv_now.apply(&world.mirror_world(source, reflector, t)),
                inv_next.apply(&world.mirror_world(source, reflector, t + VELOCITY_STEP)),
            ),
        };
        let radial = (next.norm() - now.norm()) / VELOCITY_STEP;
        let radar = body_to_radar(p);
        let range = radar.norm();
        let rb = (range / r.range_res).round() as isize;
        let db = (radial / r.doppler_res).round() as isize + (cols / 2) as isize;
        let snr = rng.random_range(r.snr_db[0]..=r.snr_db[1]);
        if rb < 0 || rb >= rows as isize || db < 0 || db >= cols as isize {
            continue;
        }
        let (rb, db) = (rb as usize, db as usize);
        let amplitude = r.noise_power * 10f64.powf(snr / 10.0);
        power[(rb, db)] += amplitude;
        if amplitude > strongest[(rb, db)] {
            strongest[(rb, db)] = amplitude;
            azimuth[(rb, db)] = radar.x.atan2(radar.y);
            elevation[(rb, db)] = (radar.z / range).clamp(-1.0, 1.0).asin();
        }
    }
    Ok(RangeDopplerMatrix::new(power, r.range_res, r.doppler_res)?
        .with_angle_map(AngleMap { azimuth, elevation })?)
}

/// Generates every observation of the configured scene with its ground
/// truth. The output depends only on the configuration.
pub fn generate(cfg: &SceneConfig) -> Result<Scene, SimError> {
    cfg.validate()?;
    let intrinsics = cfg.intrinsics()?;
    let world = build_world(cfg);
    let times = cfg.frame_times();

    let mut records: Vec<FrameRecord> = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        let previous = records.last().map(|r| r.provenance.as_slice());
        let record = generate_frame(&world, k, t, previous)?;
        records.push(record);
    }
    let (pair_obs, pair_truth): (Vec<_>, Vec<_>) = (1..times.len())
        .map(|k| generate_pair(&world, k, &times, &records, &intrinsics))
        .unzip();
    let rdms = if cfg.radar.rdm {
        records
            .iter()
            .enumerate()
            .map(|(k, rec)| synthesize_rdm(&world, k, times[k], rec))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };
    let (truth_poses, vi_poses, inertial_poses) = pose_streams(cfg, &times)?;

    let mut clouds = Vec::new();
    let mut provenance = Vec::new();
    let mut truth_clouds = Vec::new();
    let mut truth_labels = Vec::new();
    for rec in records {
        clouds.push(rec.cloud);
        provenance.push(rec.provenance);
        truth_clouds.push(rec.truth);
        truth_labels.push(rec.truth_labels);
    }
    Ok(Scene {
        config: cfg.clone(),
        observations: Observations {
            intrinsics,
            image_size: (cfg.camera.width, cfg.camera.height),
            timestamps: times.clone(),
            clouds,
            pairs: pair_obs,
            vi_poses,
            inertial_poses,
            rdms,
            objects: cfg.objects.len() as u32,
        },
        truth: GroundTruth {
            poses: truth_poses,
            frame_poses: times.iter().map(|&t| cfg.trajectory.pose(t)).collect(),
            clouds: truth_clouds,
            cloud_labels: truth_labels,
            provenance,
            pairs: pair_truth,
            reflectors: cfg.reflectors.clone(),
        },
    })
}
