//! The refinement pipeline run over a simulated scene.
//!
//! For each evaluated frame `k`, feature tracks of the pair `k−1 → k` are
//! reconstructed (jointly with the object translation for moving objects
//! when dynamic reconstruction is on, by static triangulation otherwise),
//! the radar window ending at `k` is aligned with flow-based Kabsch
//! transforms, spurious radar points are removed, and the union of the
//! remaining radar points and the reconstructed features is scored against
//! the truth cloud of frame `k`.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, warn};
use mmrefine::geometry::{FeatureTrack, RigidTransform, Vec3};
use mmrefine::metrics::MetricReport;
use mmrefine::motion::{
    ekf_fuse, kabsch, relative_transform, select_static, transform_consistency_loss, PoseStream,
};
use mmrefine::reconstruction::{initial_guess, solve, DepthAnchor, ReconstructionProblem};
use mmrefine::sim::export::{load_observations, load_truth_cloud};
use mmrefine::sim::scene::Observations;
use mmrefine::spurious::{mark_spurious, PointLabel, StabilityContext};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

/// Everything a run reads from a scene directory.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub observations: Observations,
    /// Truth surface points per frame, body coordinates.
    pub truth: Vec<Vec<Vec3>>,
}

impl RunInputs {
    pub fn load(scene: &Path) -> Result<Self, CliError> {
        let context = scene.display().to_string();
        if !scene.is_dir() {
            return Err(CliError::Input(format!(
                "{context}: scene directory not found"
            )));
        }
        for rel in ["manifest.json", "poses/vi.csv", "poses/inertial.csv"] {
            if !scene.join(rel).is_file() {
                return Err(CliError::Input(format!("{context}: missing {rel}")));
            }
        }
        let observations = load_observations(scene).map_err(|e| CliError::read(&context, e))?;
        let truth = (0..observations.timestamps.len())
            .map(|k| {
                load_truth_cloud(scene, k)
                    .map(|(points, _)| points)
                    .map_err(|e| CliError::read(&context, e))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            observations,
            truth,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectMethod {
    /// Joint solve for positions and translation.
    Dynamic,
    /// Static triangulation, as chosen by the configuration.
    Triangulated,
    /// Static triangulation after the joint solve failed.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectOutcome {
    pub object: u32,
    pub tracks: usize,
    pub method: ObjectMethod,
    pub anchor_depth: Option<f64>,
    /// Velocity in the later frame (m/s), when solved jointly.
    pub velocity: Option<[f64; 3]>,
    /// Feature points that passed the depth gate.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub timestamp: f64,
    pub radar_points: usize,
    pub flagged: usize,
    pub background_points: usize,
    pub objects: Vec<ObjectOutcome>,
    /// Window pairs aligned from radar flow rather than fused poses.
    pub flow_aligned_pairs: usize,
    /// Mean consistency error of the flow transforms against fused poses.
    pub transform_loss: Option<f64>,
    pub cloud_points: usize,
    pub metrics: Option<MetricReport>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub rpcdl: usize,
    pub clutter_count: usize,
    pub chamfer: f64,
    pub modified_hausdorff: f64,
}

/// Aggregate of one run, written as `aggregate.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub frames_evaluated: usize,
    pub mean_chamfer: Option<f64>,
    pub median_chamfer: Option<f64>,
    pub mean_modified_hausdorff: Option<f64>,
    pub median_modified_hausdorff: Option<f64>,
    pub mean_rpcdl: Option<f64>,
    pub mean_clutter_count: Option<f64>,
    pub mean_cloud_points: Option<f64>,
    pub failures: usize,
    pub per_frame: Vec<FrameMetrics>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub frames: Vec<FrameResult>,
    pub summary: Summary,
}

/// Camera motion estimates for the pair `k−1 → k`.
#[derive(Debug, Clone)]
struct PairMotion {
    fused: RigidTransform,
    flow: Option<RigidTransform>,
    loss: Option<f64>,
}

impl PairMotion {
    fn window_step(&self) -> &RigidTransform {
        self.flow.as_ref().unwrap_or(&self.fused)
    }
}

pub fn run(inputs: &RunInputs, cfg: &RunConfig) -> RunResult {
    let obs = &inputs.observations;
    let n = obs.timestamps.len();
    let (poses, fusion_failure) = match ekf_fuse(&obs.vi_poses, &obs.inertial_poses, &cfg.ekf) {
        Ok(fused) => (fused.poses, None),
        Err(e) => {
            warn!("pose fusion failed ({e}); using visual-inertial poses");
            (obs.vi_poses.clone(), Some(format!("pose fusion: {e}")))
        }
    };

    let motions: Vec<Option<PairMotion>> = (1..n)
        .into_par_iter()
        .map(|k| pair_motion(obs, &poses, k))
        .collect();

    let first = cfg.filter.window - 1;
    let frames: Vec<FrameResult> = (first.max(1)..n)
        .into_par_iter()
        .map(|k| {
            let mut result = process_frame(inputs, cfg, &motions, k);
            if let Some(f) = &fusion_failure {
                result.failures.insert(0, f.clone());
            }
            result
        })
        .collect();
    let summary = summarize(cfg, &frames);
    RunResult { frames, summary }
}

fn pair_motion(obs: &Observations, poses: &PoseStream, k: usize) -> Option<PairMotion> {
    let (t_prev, t_curr) = (obs.timestamps[k - 1], obs.timestamps[k]);
    let fused = relative_transform(poses, t_curr, t_prev).ok()?;
    let flow = obs.pairs[k - 1].flow.as_ref().and_then(|set| {
        let pairs = select_static(set).ok()?;
        let (src, dst): (Vec<Vec3>, Vec<Vec3>) = pairs.into_iter().unzip();
        let t = kabsch(&src, &dst, None).ok()?;
        let loss = transform_consistency_loss(&fused, &t, set.points()).ok();
        Some((t, loss))
    });
    Some(PairMotion {
        fused,
        loss: flow.as_ref().and_then(|(_, l)| *l),
        flow: flow.map(|(t, _)| t),
    })
}

fn process_frame(
    inputs: &RunInputs,
    cfg: &RunConfig,
    motions: &[Option<PairMotion>],
    k: usize,
) -> FrameResult {
    let obs = &inputs.observations;
    let mut failures = Vec::new();
    let mut cloud: Vec<Vec3> = Vec::new();

    let Some(camera) = motions[k - 1].as_ref() else {
        return failed_frame(inputs, k, "no camera pose for the preceding pair".into());
    };
    let dt = obs.timestamps[k] - obs.timestamps[k - 1];
    let features = reconstruct_pair(obs, cfg, k, &camera.fused, dt, &mut failures);

    // Window transforms Tᵢ⁰, chained pair by pair back from frame k.
    let f = cfg.filter.window;
    let mut transforms = Vec::with_capacity(f - 1);
    let mut delta_ts = Vec::with_capacity(f - 1);
    let mut flow_aligned = 0;
    let mut losses = Vec::new();
    let mut chain = RigidTransform::identity();
    for i in 1..f {
        let Some(step) = motions[k - i].as_ref() else {
            return failed_frame(inputs, k, format!("no camera pose for pair {}", k - i + 1));
        };
        if step.flow.is_some() {
            flow_aligned += 1;
        }
        losses.extend(step.loss);
        chain = chain.compose(step.window_step());
        transforms.push(chain);
        delta_ts.push(obs.timestamps[k] - obs.timestamps[k - i]);
    }

    let radar = &obs.clouds[k];
    let mut flagged = 0;
    if cfg.spurious_filter {
        let translations: BTreeMap<u32, Vec<Vec3>> = features
            .velocities
            .iter()
            .map(|(&j, v)| (j, delta_ts.iter().map(|dt| v * *dt).collect()))
            .collect();
        let window = (0..f).map(|i| obs.clouds[k - i].clone()).collect();
        let outcome = StabilityContext::new(
            window,
            transforms,
            delta_ts,
            translations,
            cfg.filter.min_range,
            cfg.filter.percentile,
        )
        .and_then(|ctx| mark_spurious(&ctx));
        match outcome {
            Ok(outcome) => {
                flagged = outcome.frame.spurious().iter().filter(|s| **s).count();
                cloud.extend(outcome.frame.kept_points());
            }
            Err(e) => {
                failures.push(format!("spurious filter: {e}"));
                cloud.extend_from_slice(radar.points());
            }
        }
    } else {
        cloud.extend_from_slice(radar.points());
    }
    cloud.extend_from_slice(&features.background);
    cloud.extend(features.dynamic.iter().flatten());

    let metrics = match MetricReport::evaluate(&cloud, &inputs.truth[k], cfg.metrics.delta) {
        Ok(m) => Some(m),
        Err(e) => {
            failures.push(format!("metrics: {e}"));
            None
        }
    };
    for msg in &failures {
        debug!("frame {k}: {msg}");
    }
    FrameResult {
        frame: k,
        timestamp: obs.timestamps[k],
        radar_points: radar.len(),
        flagged,
        background_points: features.background.len(),
        objects: features.outcomes,
        flow_aligned_pairs: flow_aligned,
        transform_loss: (!losses.is_empty())
            .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        cloud_points: cloud.len(),
        metrics,
        failures,
    }
}

fn failed_frame(inputs: &RunInputs, k: usize, reason: String) -> FrameResult {
    warn!("frame {k}: {reason}");
    FrameResult {
        frame: k,
        timestamp: inputs.observations.timestamps[k],
        radar_points: inputs.observations.clouds[k].len(),
        flagged: 0,
        background_points: 0,
        objects: Vec::new(),
        flow_aligned_pairs: 0,
        transform_loss: None,
        cloud_points: 0,
        metrics: None,
        failures: vec![reason],
    }
}

/// Feature points of one pair, expressed in the later frame.
struct PairFeatures {
    background: Vec<Vec3>,
    dynamic: Vec<Vec<Vec3>>,
    outcomes: Vec<ObjectOutcome>,
    /// Object velocities (m/s) in the later frame, from joint solves only.
    velocities: BTreeMap<u32, Vec3>,
}

fn reconstruct_pair(
    obs: &Observations,
    cfg: &RunConfig,
    k: usize,
    camera: &RigidTransform,
    dt: f64,
    failures: &mut Vec<String>,
) -> PairFeatures {
    let mut groups: BTreeMap<u32, Vec<FeatureTrack>> = BTreeMap::new();
    for track in &obs.pairs[k - 1].tracks {
        groups.entry(track.object_id).or_default().push(*track);
    }
    let gate = |p: Vec3| {
        let q = camera.apply(&p);
        (q.z > cfg.features.min_depth && q.z <= cfg.features.max_depth).then_some(q)
    };
    let triangulate = |tracks: &[FeatureTrack]| -> Vec<Vec3> {
        tracks
            .iter()
            .filter_map(|t| initial_guess(t, &obs.intrinsics, camera).ok())
            .filter_map(gate)
            .collect()
    };

    let mut out = PairFeatures {
        background: Vec::new(),
        dynamic: Vec::new(),
        outcomes: Vec::new(),
        velocities: BTreeMap::new(),
    };
    for (&object, tracks) in &groups {
        if object == 0 {
            out.background = triangulate(tracks);
            continue;
        }
        let mut outcome = ObjectOutcome {
            object,
            tracks: tracks.len(),
            method: ObjectMethod::Triangulated,
            anchor_depth: None,
            velocity: None,
            points: 0,
        };
        let points = if cfg.dynamic_reconstruction {
            outcome.anchor_depth = radar_depth(obs, k - 1, object, cfg.solver.min_anchor_points);
            match solve_object(obs, cfg, tracks, camera, outcome.anchor_depth) {
                Ok((positions, translation)) => {
                    outcome.method = ObjectMethod::Dynamic;
                    let velocity = camera.rotate(&translation) / dt;
                    outcome.velocity = Some(velocity.into());
                    out.velocities.insert(object, velocity);
                    positions
                        .iter()
                        .filter_map(|p| gate(p + translation))
                        .collect()
                }
                Err(reason) => {
                    warn!("frame {k}, object {object}: {reason}; falling back to triangulation");
                    failures.push(format!("object {object}: {reason}"));
                    outcome.method = ObjectMethod::Fallback;
                    triangulate(tracks)
                }
            }
        } else {
            triangulate(tracks)
        };
        outcome.points = points.len();
        out.outcomes.push(outcome);
        out.dynamic.push(points);
    }
    out
}

fn solve_object(
    obs: &Observations,
    cfg: &RunConfig,
    tracks: &[FeatureTrack],
    camera: &RigidTransform,
    anchor_depth: Option<f64>,
) -> Result<(Vec<Vec3>, Vec3), String> {
    let problem = ReconstructionProblem::new(tracks.to_vec(), obs.intrinsics, *camera)
        .map_err(|e| e.to_string())?;
    let mut opts = cfg.solver.options();
    if let Some(mean_depth) = anchor_depth {
        opts = opts.with_anchor(DepthAnchor {
            mean_depth,
            sigma: cfg.solver.anchor_sigma,
        });
    }
    let solution = solve(&problem, &opts).map_err(|e| e.to_string())?;
    Ok((solution.positions, solution.translation))
}

/// Median forward depth of the radar points labelled with `object`.
fn radar_depth(obs: &Observations, frame: usize, object: u32, min_points: usize) -> Option<f64> {
    let cloud = &obs.clouds[frame];
    let mut depths: Vec<f64> = cloud
        .points()
        .iter()
        .zip(cloud.labels())
        .filter(|(_, l)| **l == PointLabel::Dynamic(object))
        .map(|(p, _)| p.z)
        .collect();
    if depths.len() < min_points.max(1) {
        return None;
    }
    Some(median(&mut depths))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn summarize(cfg: &RunConfig, frames: &[FrameResult]) -> Summary {
    let scored: Vec<(usize, MetricReport, usize)> = frames
        .iter()
        .filter_map(|f| f.metrics.map(|m| (f.frame, m, f.cloud_points)))
        .collect();
    let failures = frames.iter().map(|f| f.failures.len()).sum();
    Summary::from_frames(cfg.method_name(), &scored, failures)
}

impl Summary {
    /// Aggregates `(frame, metrics, cloud size)` records.
    pub fn from_frames(
        method: String,
        scored: &[(usize, MetricReport, usize)],
        failures: usize,
    ) -> Self {
        let per_frame: Vec<FrameMetrics> = scored
            .iter()
            .map(|(frame, m, _)| FrameMetrics {
                frame: *frame,
                rpcdl: m.rpcdl,
                clutter_count: m.clutter_count,
                chamfer: m.chamfer,
                modified_hausdorff: m.modified_hausdorff,
            })
            .collect();
        let mut chamfer: Vec<f64> = per_frame.iter().map(|m| m.chamfer).collect();
        let mut mhd: Vec<f64> = per_frame.iter().map(|m| m.modified_hausdorff).collect();
        Summary {
            method,
            frames_evaluated: per_frame.len(),
            mean_chamfer: mean(chamfer.iter().copied()),
            median_chamfer: (!chamfer.is_empty()).then(|| median(&mut chamfer)),
            mean_modified_hausdorff: mean(mhd.iter().copied()),
            median_modified_hausdorff: (!mhd.is_empty()).then(|| median(&mut mhd)),
            mean_rpcdl: mean(per_frame.iter().map(|m| m.rpcdl as f64)),
            mean_clutter_count: mean(per_frame.iter().map(|m| m.clutter_count as f64)),
            mean_cloud_points: mean(scored.iter().map(|(_, _, n)| *n as f64)),
            failures,
            per_frame,
        }
    }
}
