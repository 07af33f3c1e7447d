//! Radar ego-motion: rigid registration of static correspondences, the
//! transform-consistency metric, pose streams and EKF pose fusion.

mod ekf;
mod pose;

pub use ekf::{ekf_fuse, EkfConfig, FusedStream};
pub use pose::{relative_transform, PoseStream};

use nalgebra::{Matrix3, SVD};
use thiserror::Error;

use crate::geometry::{RigidTransform, Vec3};

/// Points with a moving probability at or above this value are dynamic.
pub const MOVING_THRESHOLD: f64 = 0.5;

/// Ratio of second to first singular value below which a registration is
/// treated as collinear.
const COLLINEAR_RATIO: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("point set fields have different lengths ({points} points, {flow} flow vectors, {probs} probabilities)")]
    LengthMismatch {
        points: usize,
        flow: usize,
        probs: usize,
    },
    #[error("moving probability {value} at index {index} is outside [0, 1]")]
    InvalidProbability { index: usize, value: f64 },
    #[error("only {count} static points, at least 3 are required")]
    TooFewStatic { count: usize },
    #[error("correspondences are degenerate (collinear or fewer than 3)")]
    DegenerateConfiguration,
    #[error("invalid weights: {0}")]
    InvalidWeights(&'static str),
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("timestamps must be strictly increasing (index {index})")]
    NonMonotonicTimestamps { index: usize },
    #[error("pose streams do not overlap in time")]
    NoTemporalOverlap,
    #[error("time {t} is outside the stream span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("pose CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("pose CSV row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Points of the previous radar frame with predicted scene flow and
/// per-point moving probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointSet {
    points: Vec<Vec3>,
    flow: Vec<Vec3>,
    moving_prob: Vec<f64>,
}

impl ScenePointSet {
    pub fn new(
        points: Vec<Vec3>,
        flow: Vec<Vec3>,
        moving_prob: Vec<f64>,
    ) -> Result<Self, MotionError> {
        if points.len() != flow.len() || points.len() != moving_prob.len() {
            return Err(MotionError::LengthMismatch {
                points: points.len(),
                flow: flow.len(),
                probs: moving_prob.len(),
            });
        }
        if let Some((index, &value)) = moving_prob
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(MotionError::InvalidProbability { index, value });
        }
        Ok(Self {
            points,
            flow,
            moving_prob,
        })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn flow(&self) -> &[Vec3] {
        &self.flow
    }

    pub fn moving_prob(&self) -> &[f64] {
        &self.moving_prob
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pairs `(p, p + f)` for every point judged static.
pub fn select_static(set: &ScenePointSet) -> Result<Vec<(Vec3, Vec3)>, MotionError> {
    let pairs: Vec<(Vec3, Vec3)> = set
        .points
        .iter()
        .zip(&set.flow)
        .zip(&set.moving_prob)
        .filter(|(_, &m)| m < MOVING_THRESHOLD)
        .map(|((p, f), _)| (*p, p + f))
        .collect();
    if pairs.len() < 3 {
        return Err(MotionError::TooFewStatic { count: pairs.len() });
    }
    Ok(pairs)
}

/// Weighted least-squares rigid transform taking `src` onto `dst`.
///
/// Minimizes `Σ wᵢ ‖R srcᵢ + t − dstᵢ‖²`. A reflection in the SVD solution
/// is corrected by flipping the sign of the weakest singular direction.
pub fn kabsch(
    src: &[Vec3],
    dst: &[Vec3],
    weights: Option<&[f64]>,
) -> Result<RigidTransform, MotionError> {
    if src.len() != dst.len() {
        return Err(MotionError::LengthMismatch {
            points: src.len(),
            flow: dst.len(),
            probs: weights.map_or(src.len(), <[f64]>::len),
        });
    }
    if src.len() < 3 {
        return Err(MotionError::DegenerateConfiguration);
    }
    let uniform = vec![1.0; src.len()];
    let w = match weights {
        Some(w) if w.len() != src.len() => {
            return Err(MotionError::InvalidWeights("length differs from points"))
        }
        Some(w) if w.iter().any(|x| !x.is_finite() || *x < 0.0) => {
            return Err(MotionError::InvalidWeights(
                "weights must be finite and non-negative",
            ))
        }
        Some(w) => w,
        None => &uniform,
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(MotionError::InvalidWeights("weights sum to zero"));
    }

    let centroid = |pts: &[Vec3]| pts.iter().zip(w).map(|(p, wi)| p * *wi).sum::<Vec3>() / total;
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for ((s, d), wi) in src.iter().zip(dst).zip(w) {
        h += (s - cs) * (d - cd).transpose() * *wi;
    }

    let svd = SVD::new(h, true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] < COLLINEAR_RATIO * sv[0] {
        return Err(MotionError::DegenerateConfiguration);
    }

    let v = v_t.transpose();
    let mut correction = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        // nalgebra does not sort singular values, so flip the smallest one.
        let weakest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        correction[(weakest, weakest)] = -1.0;
    }
    let rotation = v * correction * u.transpose();
    let translation = cd - rotation * cs;
    // Re-orthonormalize to wash out rounding before the checked constructor.
    let candidate = RigidTransform::new(rotation, translation).unwrap_or_else(|_| {
        RigidTransform::from_rotation(nalgebra::Rotation3::from_matrix(&rotation), translation)
    });
    Ok(candidate)
}

/// Sum of squared registration residuals `Σ ‖T srcᵢ − dstᵢ‖²`.
pub fn registration_cost(t: &RigidTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(s, d)| (t.apply(s) - d).norm_squared())
        .sum()
}

/// Mean per-point consistency error between a reference transform and an
/// estimate: `(1/M) Σ ‖(Rᵀ R̂ − I) p + t − t̂‖`.
pub fn transform_consistency_loss(
    reference: &RigidTransform,
    estimate: &RigidTransform,
    points: &[Vec3],
) -> Result<f64, MotionError> {
    if points.is_empty() {
        return Err(MotionError::EmptyPointSet);
    }
    // (RᵀR̂ − I) p is evaluated as Rᵀ(R̂ p − R p), which is exactly zero
    // when the rotations agree.
    let rt = reference.rotation().transpose();
    let translation_gap = reference.translation() - estimate.translation();
    let total: f64 = points
        .iter()
        .map(|p| (rt * (estimate.rotate(p) - reference.rotate(p)) + translation_gap).norm())
        .sum();
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triad() -> Vec<Vec3> {
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
        ]
    }

    #[test]
    fn select_static_uses_half_threshold() {
        let pts = triad();
        let set =
            ScenePointSet::new(pts.clone(), vec![Vec3::x(); 4], vec![0.9, 0.1, 0.1, 0.1]).unwrap();
        let pairs = select_static(&set).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0], (pts[1], pts[1] + Vec3::x()));

        let set = ScenePointSet::new(pts.clone(), vec![Vec3::zeros(); 4], vec![0.0; 4]).unwrap();
        assert_eq!(select_static(&set).unwrap().len(), 4);

        let set = ScenePointSet::new(pts.clone(), vec![Vec3::zeros(); 4], vec![1.0; 4]).unwrap();
        assert!(matches!(
            select_static(&set),
            Err(MotionError::TooFewStatic { count: 0 })
        ));

        // Exactly 0.5 counts as moving.
        let set =
            ScenePointSet::new(pts, vec![Vec3::zeros(); 4], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!(matches!(
            select_static(&set),
            Err(MotionError::TooFewStatic { count: 2 })
        ));
    }

    #[test]
    fn point_set_validation() {
        assert!(matches!(
            ScenePointSet::new(triad(), vec![], vec![0.0; 4]),
            Err(MotionError::LengthMismatch { .. })
        ));
        assert!(matches!(
            ScenePointSet::new(triad(), vec![Vec3::zeros(); 4], vec![0.0, 1.2, 0.0, 0.0]),
            Err(MotionError::InvalidProbability { index: 1, .. })
        ));
    }

    #[test]
    fn kabsch_identity_and_degenerate() {
        let pts = triad();
        let t = kabsch(&pts, &pts, None).unwrap();
        let (rot, trans) = t.distance(&RigidTransform::identity());
        assert!(rot < 1e-12 && trans < 1e-12);

        let line: Vec<Vec3> = (0..5)
            .map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5))
            .collect();
        assert!(matches!(
            kabsch(&line, &line, None),
            Err(MotionError::DegenerateConfiguration)
        ));
        assert!(matches!(
            kabsch(&pts[..2], &pts[..2], None),
            Err(MotionError::DegenerateConfiguration)
        ));
    }

    #[test]
    fn kabsch_planar_points_do_not_reflect() {
        // Coplanar input gives a zero singular value; the determinant fix
        // must still return a proper rotation.
        let src = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
        ];
        let truth = RigidTransform::from_axis_angle(
            Vec3::new(0.2, 1.0, -0.3),
            2.5,
            Vec3::new(1.0, -2.0, 0.5),
        );
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = kabsch(&src, &dst, None).unwrap();
        assert!((est.rotation().determinant() - 1.0).abs() < 1e-12);
        let (rot, trans) = est.distance(&truth);
        assert!(rot < 1e-9 && trans < 1e-9);
    }

    #[test]
    fn zero_weight_ignores_outlier() {
        let src = triad();
        let truth = RigidTransform::from_axis_angle(Vec3::z(), 0.3, Vec3::new(0.5, 0.0, 0.0));
        let mut dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        dst.push(Vec3::new(100.0, 100.0, 100.0));
        let mut src = src;
        src.push(Vec3::zeros());
        let est = kabsch(&src, &dst, Some(&[1.0, 1.0, 1.0, 1.0, 0.0])).unwrap();
        let (rot, trans) = est.distance(&truth);
        assert!(rot < 1e-9 && trans < 1e-9);
        assert!(matches!(
            kabsch(&src, &dst, Some(&[1.0, -1.0, 1.0, 1.0, 0.0])),
            Err(MotionError::InvalidWeights(_))
        ));
    }

    #[test]
    fn consistency_loss_examples() {
        let pts = triad();
        let t = RigidTransform::from_axis_angle(Vec3::y(), 0.4, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(transform_consistency_loss(&t, &t, &pts).unwrap(), 0.0);

        let shifted =
            RigidTransform::new(*t.rotation(), t.translation() - Vec3::new(0.1, 0.0, 0.0)).unwrap();
        let loss = transform_consistency_loss(&t, &shifted, &pts).unwrap();
        assert!((loss - 0.1).abs() < 1e-12);
        assert!(matches!(
            transform_consistency_loss(&t, &t, &[]),
            Err(MotionError::EmptyPointSet)
        ));
    }
}
