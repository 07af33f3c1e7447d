//! Two-view reconstruction of features on a translating rigid object.
//!
//! Every feature of one object shares the object's translation `Δd` between
//! the two frames, so the unknown vector is `X = (P₁, …, P_N, Δd)` with six
//! residual rows per feature. The problem is minimised with
//! Levenberg–Marquardt on a finite-difference Jacobian.
//!
//! From two views alone the family `Pᵢ → s·Pᵢ`, `Δd → (1-s)·c₂ + s·Δd`
//! (with `c₂` the second camera centre) leaves every row unchanged, so the
//! Jacobian is rank deficient at any zero-cost point. [`solve`] detects this
//! and reports [`NonConvergence::RankDeficient`] instead of returning an
//! arbitrary member of the family. A [`DepthAnchor`] fixes the scale.

mod lm;

use nalgebra::{DMatrix, DVector, SVD};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{
    residual_6, CameraIntrinsics, DynamicFeatureState, FeatureTrack, GeometryError, RigidTransform,
    Vec3,
};
use lm::{LeastSquares, LmSettings, Termination};

/// Rays closer than this angle (radians) are treated as parallel.
pub const PARALLEL_RAY_ANGLE: f64 = 1e-6;

/// Minimum depth (m) of LM iterates in both cameras.
const DEPTH_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReconstructionError {
    #[error("object has {count} feature(s); at least 2 are required")]
    UnderdeterminedObject { count: usize },
    #[error("tracks carry mixed object ids ({first} and {other})")]
    MixedObjects { first: u32, other: u32 },
    #[error("viewing rays are parallel")]
    DegenerateRays,
    #[error("solver did not converge ({reason:?})")]
    NotConverged {
        reason: NonConvergence,
        best: Box<ReconstructionSolution>,
    },
    #[error("solution places feature {index} behind a camera")]
    CheiralityViolation { index: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NonConvergence {
    MaxIterations,
    /// The start point could not be evaluated.
    InvalidStart,
    /// The Jacobian at the solution has a null direction: the data do not
    /// determine a unique solution.
    RankDeficient,
}

/// Soft prior on the mean depth of an object's features in the previous
/// frame, expressed as one extra residual row `(mean zᵢ - depth) / sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthAnchor {
    pub mean_depth: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_iterations: usize,
    pub g_tol: f64,
    pub f_tol: f64,
    /// Divisor for the two cosine-law rows (m²).
    pub cosine_scale: f64,
    /// Divisor for the four reprojection rows.
    pub reprojection_scale: f64,
    pub max_restarts: usize,
    /// Restarts are tried when the first solve ends above this cost.
    pub restart_cost: f64,
    /// Offset (m) of the restart translations along the camera motion.
    pub restart_offset: f64,
    /// Smallest accepted ratio of extreme singular values of the weighted
    /// Jacobian at the solution.
    pub rank_tolerance: f64,
    pub depth_anchor: Option<DepthAnchor>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_iterations: 200,
            g_tol: 1e-10,
            f_tol: 1e-12,
            cosine_scale: 10.0 * 10.0,
            reprojection_scale: 1.0,
            max_restarts: 3,
            restart_cost: 1e-8,
            restart_offset: 0.5,
            rank_tolerance: 1e-8,
            depth_anchor: None,
        }
    }
}

impl SolverOptions {
    pub fn with_anchor(mut self, anchor: DepthAnchor) -> Self {
        self.depth_anchor = Some(anchor);
        self
    }

    fn lm(&self) -> LmSettings {
        LmSettings {
            initial_damping: self.initial_damping,
            damping_increase: self.damping_increase,
            damping_decrease: self.damping_decrease,
            max_iterations: self.max_iterations,
            g_tol: self.g_tol,
            f_tol: self.f_tol,
        }
    }
}

/// Tracks of one rigid object between two frames.
#[derive(Debug, Clone)]
pub struct ReconstructionProblem {
    tracks: Vec<FeatureTrack>,
    intrinsics: CameraIntrinsics,
    camera_pose: RigidTransform,
}

impl ReconstructionProblem {
    /// `camera_pose` maps previous-frame points into the current frame.
    pub fn new(
        tracks: Vec<FeatureTrack>,
        intrinsics: CameraIntrinsics,
        camera_pose: RigidTransform,
    ) -> Result<Self, ReconstructionError> {
        // 6N residual rows must cover 3N + 3 unknowns.
        if tracks.len() < 2 || 6 * tracks.len() < 3 * tracks.len() + 3 {
            return Err(ReconstructionError::UnderdeterminedObject {
                count: tracks.len(),
            });
        }
        let first = tracks[0].object_id;
        if let Some(other) = tracks.iter().find(|t| t.object_id != first) {
            return Err(ReconstructionError::MixedObjects {
                first,
                other: other.object_id,
            });
        }
        Ok(Self {
            tracks,
            intrinsics,
            camera_pose,
        })
    }

    pub fn tracks(&self) -> &[FeatureTrack] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn object_id(&self) -> u32 {
        self.tracks[0].object_id
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn camera_pose(&self) -> &RigidTransform {
        &self.camera_pose
    }

    pub fn num_unknowns(&self) -> usize {
        3 * self.len() + 3
    }

    pub fn num_residuals(&self) -> usize {
        6 * self.len()
    }

    /// Packs positions and translation into `X = (P₁, …, P_N, Δd)`.
    pub fn pack(&self, positions: &[Vec3], translation: &Vec3) -> DVector<f64> {
        assert_eq!(positions.len(), self.len());
        let mut x = DVector::zeros(self.num_unknowns());
        for (i, p) in positions.iter().enumerate() {
            x.fixed_rows_mut::<3>(3 * i).copy_from(p);
        }
        x.fixed_rows_mut::<3>(3 * self.len()).copy_from(translation);
        x
    }

    fn state(&self, x: &DVector<f64>, i: usize) -> DynamicFeatureState {
        DynamicFeatureState::new(
            x.fixed_rows::<3>(3 * i).into_owned(),
            x.fixed_rows::<3>(3 * self.len()).into_owned(),
        )
    }

    fn feature_residual(
        &self,
        x: &DVector<f64>,
        i: usize,
    ) -> Result<nalgebra::Vector6<f64>, GeometryError> {
        residual_6(
            &self.intrinsics,
            &self.camera_pose,
            &self.state(x, i),
            &self.tracks[i],
        )
    }

    /// Stacked unweighted residual, 6 rows per feature.
    pub fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>, GeometryError> {
        let mut r = DVector::zeros(self.num_residuals());
        for i in 0..self.len() {
            r.fixed_rows_mut::<6>(6 * i)
                .copy_from(&self.feature_residual(x, i)?);
        }
        Ok(r)
    }

    /// `½ Σ ‖eᵢ‖²` of the unweighted residual.
    pub fn cost(&self, x: &DVector<f64>) -> Result<f64, GeometryError> {
        Ok(0.5 * self.residuals(x)?.norm_squared())
    }
}

/// Central-difference step for coordinate value `v`.
pub fn fd_step(v: f64) -> f64 {
    (1e-6 * v.abs()).max(1e-6)
}

/// Central finite-difference Jacobian of the stacked residual,
/// `6N × (3N + 3)`.
///
/// Feature i's rows depend only on `Pᵢ` and `Δd`; the other position blocks
/// are left as exact zeros.
pub fn jacobian(
    problem: &ReconstructionProblem,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>, GeometryError> {
    jacobian_with_step(problem, x, 1.0)
}

/// Same as [`jacobian`] with every step multiplied by `step_scale`.
pub fn jacobian_with_step(
    problem: &ReconstructionProblem,
    x: &DVector<f64>,
    step_scale: f64,
) -> Result<DMatrix<f64>, GeometryError> {
    let n = problem.len();
    let mut j = DMatrix::zeros(problem.num_residuals(), problem.num_unknowns());
    let mut xp = x.clone();
    for i in 0..n {
        for c in 0..3 {
            let col = 3 * i + c;
            let h = fd_step(x[col]) * step_scale;
            xp[col] = x[col] + h;
            let plus = problem.feature_residual(&xp, i)?;
            xp[col] = x[col] - h;
            let minus = problem.feature_residual(&xp, i)?;
            xp[col] = x[col];
            j.view_mut((6 * i, col), (6, 1))
                .copy_from(&((plus - minus) / (2.0 * h)));
        }
    }
    for c in 0..3 {
        let col = 3 * n + c;
        let h = fd_step(x[col]) * step_scale;
        xp[col] = x[col] + h;
        let plus = problem.residuals(&xp)?;
        xp[col] = x[col] - h;
        let minus = problem.residuals(&xp)?;
        xp[col] = x[col];
        j.set_column(col, &((plus - minus) / (2.0 * h)));
    }
    Ok(j)
}

/// Forward-difference Jacobian, used as an independent check of [`jacobian`].
pub fn forward_jacobian(
    problem: &ReconstructionProblem,
    x: &DVector<f64>,
    step_scale: f64,
) -> Result<DMatrix<f64>, GeometryError> {
    let base = problem.residuals(x)?;
    let mut j = DMatrix::zeros(problem.num_residuals(), problem.num_unknowns());
    let mut xp = x.clone();
    for col in 0..problem.num_unknowns() {
        let h = fd_step(x[col]) * step_scale;
        xp[col] = x[col] + h;
        let plus = problem.residuals(&xp)?;
        xp[col] = x[col];
        j.set_column(col, &((plus - &base) / h));
    }
    Ok(j)
}

/// Row weights and the optional anchor row around a problem.
struct Weighted<'a> {
    problem: &'a ReconstructionProblem,
    opts: &'a SolverOptions,
}

impl Weighted<'_> {
    fn rows(&self) -> usize {
        self.problem.num_residuals() + usize::from(self.opts.depth_anchor.is_some())
    }

    fn weight(&self, row: usize) -> f64 {
        if row % 6 < 2 {
            1.0 / self.opts.cosine_scale
        } else {
            1.0 / self.opts.reprojection_scale
        }
    }

    /// Iterates must keep every depth above [`DEPTH_MARGIN`] so that the
    /// finite-difference stencil stays in the valid domain.
    fn inside_margin(&self, x: &DVector<f64>) -> bool {
        let n = self.problem.len();
        let t = self.problem.camera_pose();
        let dd = x.fixed_rows::<3>(3 * n);
        (0..n).all(|i| {
            let p = x.fixed_rows::<3>(3 * i).into_owned();
            let q = p + dd;
            p.z > DEPTH_MARGIN
                && q.z > DEPTH_MARGIN
                && t.apply(&p).z > DEPTH_MARGIN
                && t.apply(&q).z > DEPTH_MARGIN
        })
    }

    fn anchor_row(&self, x: &DVector<f64>, anchor: &DepthAnchor) -> f64 {
        let n = self.problem.len();
        let mean: f64 = (0..n).map(|i| x[3 * i + 2]).sum::<f64>() / n as f64;
        (mean - anchor.mean_depth) / anchor.sigma
    }
}

impl LeastSquares for Weighted<'_> {
    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        if !self.inside_margin(x) {
            return None;
        }
        let raw = self.problem.residuals(x).ok()?;
        let mut r = DVector::zeros(self.rows());
        for row in 0..raw.len() {
            r[row] = raw[row] * self.weight(row);
        }
        if let Some(anchor) = &self.opts.depth_anchor {
            r[raw.len()] = self.anchor_row(x, anchor);
        }
        Some(r)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let raw = jacobian(self.problem, x).ok()?;
        let mut j = DMatrix::zeros(self.rows(), raw.ncols());
        for row in 0..raw.nrows() {
            let w = self.weight(row);
            j.set_row(row, &(raw.row(row) * w));
        }
        if let Some(anchor) = &self.opts.depth_anchor {
            let n = self.problem.len();
            for i in 0..n {
                j[(raw.nrows(), 3 * i + 2)] = 1.0 / (n as f64 * anchor.sigma);
            }
        }
        Some(j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionSolution {
    /// Feature positions in the previous camera frame (m).
    pub positions: Vec<Vec3>,
    /// Shared object translation between the frames (m).
    pub translation: Vec3,
    /// `½ Σ ‖eᵢ‖²` of the weighted objective at the returned point,
    /// including the anchor row when present.
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted LM step of the returned run.
    pub cost_history: Vec<f64>,
    /// Ratio of smallest to largest singular value of the weighted Jacobian.
    pub conditioning: f64,
}

impl ReconstructionSolution {
    pub fn state(&self, i: usize) -> DynamicFeatureState {
        DynamicFeatureState::new(self.positions[i], self.translation)
    }
}

/// Midpoint of the shortest segment between the two viewing rays, in the
/// previous camera frame. This is the static-world triangulation.
pub fn initial_guess(
    track: &FeatureTrack,
    k: &CameraIntrinsics,
    t: &RigidTransform,
) -> Result<Vec3, ReconstructionError> {
    let d1 = k.normalize(track.prev_pixel);
    let c2 = t.source_center();
    let d2 = t.rotation().transpose() * k.normalize(track.curr_pixel);
    midpoint(&Vec3::zeros(), &d1, &c2, &d2)
}

fn midpoint(o1: &Vec3, d1: &Vec3, o2: &Vec3, d2: &Vec3) -> Result<Vec3, ReconstructionError> {
    let (u1, u2) = (d1.normalize(), d2.normalize());
    let sin = u1.cross(&u2).norm();
    if sin.asin() <= PARALLEL_RAY_ANGLE {
        return Err(ReconstructionError::DegenerateRays);
    }
    // Minimise |o1 + a u1 - o2 - b u2|².
    let w = o1 - o2;
    let b_ = u1.dot(&u2);
    let d = u1.dot(&w);
    let e = u2.dot(&w);
    let denom = 1.0 - b_ * b_;
    let a = (b_ * e - d) / denom;
    let b = (e - b_ * d) / denom;
    Ok(((o1 + u1 * a) + (o2 + u2 * b)) * 0.5)
}

/// Start point for LM: static triangulation with `Δd = 0`.
///
/// Features whose triangulation fails or lands behind a camera are placed
/// on their previous-frame ray at a fallback depth (the anchor depth, the
/// median valid depth, or 10 m).
fn starting_positions(problem: &ReconstructionProblem, opts: &SolverOptions) -> Vec<Vec3> {
    let t = problem.camera_pose();
    let guesses: Vec<Option<Vec3>> = problem
        .tracks()
        .iter()
        .map(|tr| {
            initial_guess(tr, problem.intrinsics(), t)
                .ok()
                .filter(|p| p.z > 1e-3 && t.apply(p).z > 1e-3)
        })
        .collect();
    let mut depths: Vec<f64> = guesses.iter().flatten().map(|p| p.z).collect();
    depths.sort_by(f64::total_cmp);
    let fallback = opts
        .depth_anchor
        .map(|a| a.mean_depth)
        .or_else(|| depths.get(depths.len() / 2).copied())
        .unwrap_or(10.0);
    guesses
        .iter()
        .zip(problem.tracks())
        .map(|(g, tr)| {
            g.unwrap_or_else(|| problem.intrinsics().normalize(tr.prev_pixel) * fallback)
        })
        .collect()
}

/// Closed-form start from the current-frame ray constraints.
///
/// With `P = λ r` on the previous ray and `w = Δd − c₂`, requiring
/// `P + Δd` to lie on the current ray gives `λ (r × d) + w × d = 0`, which is
/// linear and homogeneous in `(λ₁ … λ_N, w)`. The null vector is scaled so
/// that the mean depth matches the anchor, or the median triangulated depth
/// when there is no anchor.
fn linear_start(
    problem: &ReconstructionProblem,
    opts: &SolverOptions,
    fallback_positions: &[Vec3],
) -> Option<(Vec<Vec3>, Vec3)> {
    let n = problem.len();
    let k = problem.intrinsics();
    let t = problem.camera_pose();
    let rt = t.rotation().transpose();
    let rays: Vec<Vec3> = problem
        .tracks()
        .iter()
        .map(|tr| k.normalize(tr.prev_pixel))
        .collect();
    let mut a = DMatrix::zeros(3 * n, n + 3);
    for (i, tr) in problem.tracks().iter().enumerate() {
        let d = (rt * k.normalize(tr.curr_pixel)).normalize();
        let rd = rays[i].cross(&d);
        let neg_skew = -d.cross_matrix();
        for row in 0..3 {
            a[(3 * i + row, i)] = rd[row];
            for col in 0..3 {
                a[(3 * i + row, n + col)] = neg_skew[(row, col)];
            }
        }
    }
    let svd = SVD::new(a, false, true);
    let v_t = svd.v_t?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let null = v_t.row(idx).transpose();
    let mean_lambda = null.rows(0, n).sum() / n as f64;
    if mean_lambda.abs() < 1e-12 {
        return None;
    }
    let target = match opts.depth_anchor {
        Some(anchor) => anchor.mean_depth,
        None => {
            let mut z: Vec<f64> = fallback_positions.iter().map(|p| p.z).collect();
            z.sort_by(f64::total_cmp);
            z[z.len() / 2]
        }
    };
    let scale = target / mean_lambda;
    let positions: Vec<Vec3> = (0..n).map(|i| rays[i] * (null[i] * scale)).collect();
    let w = Vec3::new(null[n], null[n + 1], null[n + 2]) * scale;
    let translation = w + t.source_center();
    let valid = positions.iter().all(|p| {
        let q = p + translation;
        p.z > DEPTH_MARGIN
            && q.z > DEPTH_MARGIN
            && t.apply(p).z > DEPTH_MARGIN
            && t.apply(&q).z > DEPTH_MARGIN
    });
    valid.then_some((positions, translation))
}

fn smallest_singular_ratio(j: &DMatrix<f64>) -> f64 {
    let sv = SVD::new(j.clone(), false, false).singular_values;
    let max = sv.max();
    if max <= 0.0 {
        return 0.0;
    }
    sv.min() / max
}

struct Attempt {
    report: lm::LmReport,
}

fn run_once(
    problem: &ReconstructionProblem,
    opts: &SolverOptions,
    positions: &[Vec3],
    translation: Vec3,
) -> Attempt {
    let objective = Weighted { problem, opts };
    let x0 = problem.pack(positions, &translation);
    Attempt {
        report: lm::minimize(&objective, x0, &opts.lm()),
    }
}

/// Solves for all feature positions and the shared translation.
pub fn solve(
    problem: &ReconstructionProblem,
    opts: &SolverOptions,
) -> Result<ReconstructionSolution, ReconstructionError> {
    let start = starting_positions(problem, opts);
    let mut best = run_once(problem, opts, &start, Vec3::zeros());

    if best.report.cost > opts.restart_cost {
        let c2 = problem.camera_pose().source_center();
        let dir = if c2.norm() > 1e-12 {
            c2.normalize()
        } else {
            Vec3::z()
        };
        let linear = linear_start(problem, opts, &start);
        let offsets = [1.0, -1.0, 2.0];
        let starts = linear.into_iter().chain(
            offsets
                .iter()
                .take(opts.max_restarts)
                .map(|k| (start.clone(), dir * (k * opts.restart_offset))),
        );
        for (positions, translation) in starts {
            let attempt = run_once(problem, opts, &positions, translation);
            let better = match (attempt.report.converged(), best.report.converged()) {
                (true, false) => true,
                (false, true) => false,
                _ => attempt.report.cost < best.report.cost,
            };
            if better {
                best = attempt;
            }
            if best.report.converged() && best.report.cost <= opts.restart_cost {
                break;
            }
        }
    }

    let report = best.report;
    let x = &report.x;
    let n = problem.len();
    let objective = Weighted { problem, opts };
    let conditioning = objective
        .jacobian(x)
        .map(|j| smallest_singular_ratio(&j))
        .unwrap_or(0.0);
    let solution = ReconstructionSolution {
        positions: (0..n)
            .map(|i| x.fixed_rows::<3>(3 * i).into_owned())
            .collect(),
        translation: x.fixed_rows::<3>(3 * n).into_owned(),
        final_cost: report.cost,
        iterations: report.iterations,
        converged: report.converged(),
        cost_history: report.history.clone(),
        conditioning,
    };

    let reason = match report.termination {
        Termination::MaxIterations => Some(NonConvergence::MaxIterations),
        Termination::InvalidStart => Some(NonConvergence::InvalidStart),
        _ if conditioning < opts.rank_tolerance => Some(NonConvergence::RankDeficient),
        _ => None,
    };
    if let Some(reason) = reason {
        let mut best = solution;
        best.converged = false;
        return Err(ReconstructionError::NotConverged {
            reason,
            best: Box::new(best),
        });
    }

    let t = problem.camera_pose();
    for (i, p) in solution.positions.iter().enumerate() {
        let q = p + solution.translation;
        if p.z <= crate::geometry::DEPTH_EPS || t.apply(&q).z <= crate::geometry::DEPTH_EPS {
            return Err(ReconstructionError::CheiralityViolation { index: i });
        }
    }
    Ok(solution)
}

/// Solves independent objects in parallel; output order follows input.
pub fn solve_batch(
    problems: &[ReconstructionProblem],
    opts: &SolverOptions,
) -> Vec<Result<ReconstructionSolution, ReconstructionError>> {
    problems.par_iter().map(|p| solve(p, opts)).collect()
}

#[cfg(test)]
mod tests;
