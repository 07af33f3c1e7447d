//! Point-cloud similarity metrics: clutter split against a reference cloud,
//! the matched-point count, Chamfer distance and modified Hausdorff
//! distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::spatial::{brute_force_nearest, UniformGrid};

/// Clouds larger than this are searched through a grid index.
pub const GRID_THRESHOLD: usize = 1000;

/// Default clutter distance in metres.
pub const DEFAULT_CLUTTER_DISTANCE: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference cloud is empty")]
    EmptyTruth,
    #[error("cannot compare an empty point cloud")]
    EmptyCloud,
    #[error("clutter distance must be positive, got {0}")]
    InvalidDistance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rpcdl: usize,
    pub clutter_count: usize,
    pub chamfer: f64,
    pub modified_hausdorff: f64,
}

impl MetricReport {
    /// All four metrics of `cloud` against `reference`.
    pub fn evaluate(cloud: &[Vec3], reference: &[Vec3], delta: f64) -> Result<Self, MetricError> {
        let (valid, clutter) = clutter_split(cloud, reference, delta)?;
        if cloud.is_empty() {
            return Err(MetricError::EmptyCloud);
        }
        Ok(Self {
            rpcdl: valid.len(),
            clutter_count: clutter.len(),
            chamfer: chamfer(cloud, reference)?,
            modified_hausdorff: modified_hausdorff(cloud, reference)?,
        })
    }
}

/// Nearest-neighbour distances from each point of `from` to the set `to`.
/// Uses a grid for large targets; both paths return identical values.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    if to.is_empty() {
        return vec![f64::INFINITY; from.len()];
    }
    if to.len() <= GRID_THRESHOLD {
        return from
            .par_iter()
            .map(|p| brute_force_nearest(to, p).map_or(f64::INFINITY, |(_, d)| d))
            .collect();
    }
    let grid = UniformGrid::new(to, grid_cell(to));
    from.par_iter()
        .map(|p| grid.nearest(p).map_or(f64::INFINITY, |(_, d)| d))
        .collect()
}

/// Cell side giving a few points per occupied cell on average.
fn grid_cell(points: &[Vec3]) -> f64 {
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = hi - lo;
    let volume = extent.iter().map(|e| e.max(1e-3)).product::<f64>();
    let side = (4.0 * volume / points.len() as f64).cbrt();
    if side.is_finite() && side > 0.0 {
        side
    } else {
        1.0
    }
}

/// Splits `radar` into points within `delta` of some reference point and
/// points farther than that.
pub fn clutter_split(
    radar: &[Vec3],
    truth: &[Vec3],
    delta: f64,
) -> Result<(Vec<Vec3>, Vec<Vec3>), MetricError> {
    if truth.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    if !(delta > 0.0) {
        return Err(MetricError::InvalidDistance(delta));
    }
    let dist = nearest_distances(radar, truth);
    let (mut valid, mut clutter) = (Vec::new(), Vec::new());
    for (p, d) in radar.iter().zip(dist) {
        if d > delta {
            clutter.push(*p);
        } else {
            valid.push(*p);
        }
    }
    Ok((valid, clutter))
}

/// Number of radar points with a reference point within `delta`.
pub fn rpcdl(radar: &[Vec3], truth: &[Vec3], delta: f64) -> Result<usize, MetricError> {
    Ok(clutter_split(radar, truth, delta)?.0.len())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median with the two middle values averaged for even lengths.
fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Symmetric Chamfer distance: the average of the two directed mean
/// nearest-neighbour distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    Ok(0.5 * (mean(&nearest_distances(a, b)) + mean(&nearest_distances(b, a))))
}

/// Larger of the two directed median nearest-neighbour distances.
pub fn modified_hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    Ok(median(nearest_distances(a, b)).max(median(nearest_distances(b, a))))
}

/// Classical Hausdorff distance, the larger directed maximum.
pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(max(nearest_distances(a, b)).max(max(nearest_distances(b, a))))
}
