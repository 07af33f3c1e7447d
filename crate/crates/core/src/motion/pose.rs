use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::MotionError;
use crate::geometry::{RigidTransform, Vec3};

/// Timestamped body-to-world poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseStream {
    samples: Vec<(f64, RigidTransform)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    timestamp: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

impl PoseStream {
    pub fn new(samples: Vec<(f64, RigidTransform)>) -> Result<Self, MotionError> {
        for (index, pair) in samples.windows(2).enumerate() {
            if !(pair[1].0 > pair[0].0) {
                return Err(MotionError::NonMonotonicTimestamps { index: index + 1 });
            }
        }
        if let Some(index) = samples.iter().position(|(t, _)| !t.is_finite()) {
            return Err(MotionError::NonMonotonicTimestamps { index });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, RigidTransform)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|(t, _)| *t)
    }

    /// First and last timestamps, if any.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.samples.first()?.0, self.samples.last()?.0))
    }

    pub fn contains(&self, t: f64) -> bool {
        self.span().is_some_and(|(a, b)| t >= a && t <= b)
    }

    /// Pose at time `t`: linear interpolation of translation and spherical
    /// interpolation of rotation between the bracketing samples.
    pub fn pose_at(&self, t: f64) -> Result<RigidTransform, MotionError> {
        let Some((start, end)) = self.span() else {
            return Err(MotionError::OutOfRange {
                t,
                start: f64::NAN,
                end: f64::NAN,
            });
        };
        if !(t >= start && t <= end) {
            return Err(MotionError::OutOfRange { t, start, end });
        }
        let upper = self.samples.partition_point(|(ts, _)| *ts < t);
        let (t1, p1) = &self.samples[upper];
        if *t1 == t || upper == 0 {
            return Ok(*p1);
        }
        let (t0, p0) = &self.samples[upper - 1];
        let s = (t - t0) / (t1 - t0);
        let translation = p0.translation().lerp(p1.translation(), s);
        let rotation = p0.quaternion().slerp(&p1.quaternion(), s);
        Ok(RigidTransform::from_quaternion(rotation, translation))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, MotionError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut samples = Vec::new();
        for (row, record) in rdr.deserialize::<PoseRow>().enumerate() {
            let r = record?;
            let q = Quaternion::new(r.qw, r.qx, r.qy, r.qz);
            let norm = q.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                return Err(MotionError::MalformedRow {
                    row: row + 1,
                    reason: format!("quaternion norm {norm} is not 1"),
                });
            }
            let pose = RigidTransform::from_quaternion(
                UnitQuaternion::from_quaternion(q),
                Vec3::new(r.tx, r.ty, r.tz),
            );
            samples.push((r.timestamp, pose));
        }
        Self::new(samples)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MotionError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (timestamp, pose) in &self.samples {
            let q = pose.quaternion();
            let t = pose.translation();
            wtr.serialize(PoseRow {
                timestamp: *timestamp,
                tx: t.x,
                ty: t.y,
                tz: t.z,
                qx: q.i,
                qy: q.j,
                qz: q.k,
                qw: q.w,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MotionError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), MotionError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Transform taking coordinates in the body frame at `t_b` into the body
/// frame at `t_a`, i.e. `T(t_a)⁻¹ ∘ T(t_b)`.
pub fn relative_transform(
    stream: &PoseStream,
    t_a: f64,
    t_b: f64,
) -> Result<RigidTransform, MotionError> {
    let a = stream.pose_at(t_a)?;
    if t_a == t_b {
        return Ok(RigidTransform::identity());
    }
    let b = stream.pose_at(t_b)?;
    Ok(a.inverse().compose(&b))
}
