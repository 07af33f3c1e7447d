//! Error-state EKF that fuses a drifting high-rate pose stream with a noisy
//! unbiased one.
//!
//! The nominal state is an absolute body-to-world pose plus an estimate of
//! the drift velocity of the high-rate stream, expressed in the world frame.
//! The 9-dimensional error state is `[δp, δθ, δv]` where `δθ` is a small
//! world-frame rotation, `R_true = Exp(δθ) R`.
//!
//! Relative transforms of the high-rate stream drive propagation:
//! `p ← p + R Δp − v dt`, `R ← R ΔR`. Poses of the unbiased stream are
//! position and orientation measurements.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::{relative_transform, MotionError, PoseStream};
use crate::geometry::{RigidTransform, Vec3};

type Mat9 = SMatrix<f64, 9, 9>;
type Mat6x9 = SMatrix<f64, 6, 9>;
type Vec9 = SVector<f64, 9>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfConfig {
    /// Position random walk of the propagating stream (m/√s).
    pub sigma_propagation: f64,
    /// Position noise of the measured stream (m).
    pub sigma_measurement: f64,
    /// Orientation noise of the measured stream (rad).
    pub sigma_orientation: f64,
    /// Orientation random walk of the propagating stream (rad/√s).
    pub sigma_gyro: f64,
    /// Random walk of the drift velocity (m/s/√s).
    pub sigma_drift: f64,
    /// Initial standard deviation of the drift velocity (m/s).
    pub initial_drift_sigma: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            sigma_propagation: 0.02,
            sigma_measurement: 0.05,
            sigma_orientation: 0.01,
            sigma_gyro: 0.001,
            sigma_drift: 0.01,
            initial_drift_sigma: 0.5,
        }
    }
}

/// Fused poses at the measurement timestamps with the covariance trace
/// just before and just after each update.
#[derive(Debug, Clone)]
pub struct FusedStream {
    pub poses: PoseStream,
    pub prior_trace: Vec<f64>,
    pub posterior_trace: Vec<f64>,
    /// Drift velocity estimate after the last update (m/s, world frame).
    pub drift_velocity: Vec3,
}

struct Filter {
    position: Vec3,
    orientation: UnitQuaternion<f64>,
    drift: Vec3,
    cov: Mat9,
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    v.cross_matrix()
}

impl Filter {
    fn pose(&self) -> RigidTransform {
        RigidTransform::from_quaternion(self.orientation, self.position)
    }

    fn propagate(&mut self, step: &RigidTransform, dt: f64, cfg: &EkfConfig) {
        let world_step = self.orientation * step.translation();
        let mut f = Mat9::identity();
        f.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-skew(&world_step)));
        f.fixed_view_mut::<3, 3>(0, 6)
            .copy_from(&(-Matrix3::identity() * dt));

        self.position += world_step - self.drift * dt;
        self.orientation *= step.quaternion();

        let mut q = Mat9::zeros();
        for i in 0..3 {
            q[(i, i)] = cfg.sigma_propagation.powi(2) * dt;
            q[(i + 3, i + 3)] = cfg.sigma_gyro.powi(2) * dt;
            q[(i + 6, i + 6)] = cfg.sigma_drift.powi(2) * dt;
        }
        self.cov = f * self.cov * f.transpose() + q;
    }

    fn update(&mut self, measured: &RigidTransform, cfg: &EkfConfig) {
        let mut z = SVector::<f64, 6>::zeros();
        z.fixed_rows_mut::<3>(0)
            .copy_from(&(measured.translation() - self.position));
        let rot_err = measured.quaternion() * self.orientation.inverse();
        z.fixed_rows_mut::<3>(3).copy_from(&rot_err.scaled_axis());

        let mut h = Mat6x9::zeros();
        h.fixed_view_mut::<6, 6>(0, 0).fill_with_identity();
        let mut r = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            r[(i, i)] = cfg.sigma_measurement.powi(2);
            r[(i + 3, i + 3)] = cfg.sigma_orientation.powi(2);
        }

        let s = h * self.cov * h.transpose() + r;
        let Some(s_inv) = s.try_inverse() else {
            return;
        };
        let gain = self.cov * h.transpose() * s_inv;
        let dx: Vec9 = gain * z;

        self.position += dx.fixed_rows::<3>(0);
        self.orientation =
            UnitQuaternion::from_scaled_axis(dx.fixed_rows::<3>(3).into_owned()) * self.orientation;
        self.drift += dx.fixed_rows::<3>(6);

        // Joseph form keeps the covariance symmetric positive definite.
        let ikh = Mat9::identity() - gain * h;
        self.cov = ikh * self.cov * ikh.transpose() + gain * r * gain.transpose();
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
    }
}

/// Fuses `measured` (unbiased, noisy) with `propagating` (smooth, drifting).
///
/// Measurement timestamps outside the span of the propagating stream are
/// skipped. The filter starts at the first usable measurement.
pub fn ekf_fuse(
    measured: &PoseStream,
    propagating: &PoseStream,
    cfg: &EkfConfig,
) -> Result<FusedStream, MotionError> {
    let (Some((start, end)), Some(_)) = (propagating.span(), measured.span()) else {
        return Err(MotionError::NoTemporalOverlap);
    };
    let usable: Vec<(f64, RigidTransform)> = measured
        .samples()
        .iter()
        .filter(|(t, _)| *t >= start && *t <= end)
        .copied()
        .collect();
    let Some(&(t0, first)) = usable.first() else {
        return Err(MotionError::NoTemporalOverlap);
    };

    let mut cov = Mat9::zeros();
    for i in 0..3 {
        cov[(i, i)] = cfg.sigma_measurement.powi(2);
        cov[(i + 3, i + 3)] = cfg.sigma_orientation.powi(2);
        cov[(i + 6, i + 6)] = cfg.initial_drift_sigma.powi(2);
    }
    let mut filter = Filter {
        position: *first.translation(),
        orientation: first.quaternion(),
        drift: Vec3::zeros(),
        cov,
    };

    let mut out = vec![(t0, filter.pose())];
    let mut prior_trace = vec![cov.trace()];
    let mut posterior_trace = vec![cov.trace()];
    let knots: Vec<f64> = propagating.timestamps().collect();
    let mut prev = t0;
    for &(t, pose) in &usable[1..] {
        // Step through every propagating sample between the two measurements.
        let lo = knots.partition_point(|&k| k <= prev);
        let hi = knots.partition_point(|&k| k < t);
        let mut cursor = prev;
        for &k in knots[lo..hi].iter().chain(std::iter::once(&t)) {
            let step = relative_transform(propagating, cursor, k)?;
            filter.propagate(&step, k - cursor, cfg);
            cursor = k;
        }
        prior_trace.push(filter.cov.trace());
        filter.update(&pose, cfg);
        posterior_trace.push(filter.cov.trace());
        out.push((t, filter.pose()));
        prev = t;
    }

    Ok(FusedStream {
        poses: PoseStream::new(out)?,
        prior_trace,
        posterior_trace,
        drift_velocity: filter.drift,
    })
}
