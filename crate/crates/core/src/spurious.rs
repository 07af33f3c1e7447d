//! Velocity-adaptive spatial stability checking.
//!
//! Multipath ghosts mirror real objects about reflecting surfaces and jump
//! around from frame to frame, while returns from real surfaces stay put
//! once the frames are registered. Stacking a short window of frames in the
//! current frame and counting neighbours therefore separates the two. The
//! neighbourhood radius grows with the relative speed of each class of
//! points so that fast scenes are not over-flagged.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{RigidTransform, Vec3};
use crate::spatial::UniformGrid;

/// Minimum neighbourhood radius used in the reference setup (m).
pub const DEFAULT_MIN_RANGE: f64 = 0.5;
/// Frames per window in the reference setup.
pub const DEFAULT_WINDOW: usize = 5;
/// Points whose neighbour count falls strictly below this percentile are
/// flagged.
pub const DEFAULT_PERCENTILE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpuriousError {
    #[error("a stability window needs at least 2 frames, got {frames}")]
    TooFewFrames { frames: usize },
    #[error("time offset {dt} s of window frame {index} is not positive")]
    NonPositiveDt { index: usize, dt: f64 },
    #[error("expected {expected} {what}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label refers to object {object}, but only objects 1..={objects} are declared")]
    UnknownObject { object: u32, objects: u32 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("point cloud CSV: {0}")]
    Csv(String),
    #[error("I/O: {0}")]
    Io(String),
}

impl From<csv::Error> for SpuriousError {
    fn from(e: csv::Error) -> Self {
        SpuriousError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for SpuriousError {
    fn from(e: std::io::Error) -> Self {
        SpuriousError::Io(e.to_string())
    }
}

/// Role of a radar point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointLabel {
    Background,
    /// Point on rigid object `j`, numbered from 1.
    Dynamic(u32),
    Unknown,
}

impl PointLabel {
    /// Integer code used in CSV files: 0 background, `j` object, −1 unknown.
    pub fn code(self) -> i64 {
        match self {
            PointLabel::Background => 0,
            PointLabel::Dynamic(j) => i64::from(j),
            PointLabel::Unknown => -1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(PointLabel::Background),
            -1 => Some(PointLabel::Unknown),
            j if j > 0 => u32::try_from(j).ok().map(PointLabel::Dynamic),
            _ => None,
        }
    }
}

/// One radar frame in its own sensor coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub timestamp: f64,
    points: Vec<Vec3>,
    labels: Vec<PointLabel>,
    spurious: Vec<bool>,
    objects: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CloudRow {
    x: f64,
    y: f64,
    z: f64,
    label: i64,
    spurious: u8,
}

impl PointCloudFrame {
    /// Creates a frame with every spurious flag cleared. `objects` is the
    /// number of declared rigid objects; dynamic labels must lie in
    /// `1..=objects`.
    pub fn new(
        timestamp: f64,
        points: Vec<Vec3>,
        labels: Vec<PointLabel>,
        objects: u32,
    ) -> Result<Self, SpuriousError> {
        if labels.len() != points.len() {
            return Err(SpuriousError::LengthMismatch {
                what: "labels",
                expected: points.len(),
                got: labels.len(),
            });
        }
        for label in &labels {
            if let PointLabel::Dynamic(object) = *label {
                if object == 0 || object > objects {
                    return Err(SpuriousError::UnknownObject { object, objects });
                }
            }
        }
        let spurious = vec![false; points.len()];
        Ok(Self {
            timestamp,
            points,
            labels,
            spurious,
            objects,
        })
    }

    /// A frame whose points all carry the background label.
    pub fn unlabeled(timestamp: f64, points: Vec<Vec3>) -> Self {
        let labels = vec![PointLabel::Background; points.len()];
        Self::new(timestamp, points, labels, 0).expect("background labels are always valid")
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn labels(&self) -> &[PointLabel] {
        &self.labels
    }

    pub fn spurious(&self) -> &[bool] {
        &self.spurious
    }

    pub fn objects(&self) -> u32 {
        self.objects
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_spurious(mut self, flags: Vec<bool>) -> Result<Self, SpuriousError> {
        if flags.len() != self.points.len() {
            return Err(SpuriousError::LengthMismatch {
                what: "spurious flags",
                expected: self.points.len(),
                got: flags.len(),
            });
        }
        self.spurious = flags;
        Ok(self)
    }

    /// Same frame with every point mapped through `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            ..self.clone()
        }
    }

    /// Points whose spurious flag is clear.
    pub fn kept_points(&self) -> Vec<Vec3> {
        self.points
            .iter()
            .zip(&self.spurious)
            .filter(|(_, s)| !**s)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<(), SpuriousError> {
        if self.points.is_empty() {
            writer.write_all(b"x,y,z,label,spurious\n")?;
            return Ok(());
        }
        let mut wtr = csv::Writer::from_writer(writer);
        for ((p, label), spurious) in self.points.iter().zip(&self.labels).zip(&self.spurious) {
            wtr.serialize(CloudRow {
                x: p.x,
                y: p.y,
                z: p.z,
                label: label.code(),
                spurious: u8::from(*spurious),
            })?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(
        reader: R,
        timestamp: f64,
        objects: u32,
    ) -> Result<Self, SpuriousError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let (mut points, mut labels, mut flags) = (Vec::new(), Vec::new(), Vec::new());
        for (row, record) in rdr.deserialize::<CloudRow>().enumerate() {
            let r = record?;
            let label = PointLabel::from_code(r.label).ok_or_else(|| {
                SpuriousError::Csv(format!("row {}: invalid label {}", row + 1, r.label))
            })?;
            if r.spurious > 1 {
                return Err(SpuriousError::Csv(format!(
                    "row {}: spurious must be 0 or 1",
                    row + 1
                )));
            }
            points.push(Vec3::new(r.x, r.y, r.z));
            labels.push(label);
            flags.push(r.spurious == 1);
        }
        Self::new(timestamp, points, labels, objects)?.with_spurious(flags)
    }
}

/// A window of frames registered to the current frame.
///
/// `frames[0]` is the current frame. For `i ≥ 1`, `transforms[i-1]` maps
/// frame-`i` coordinates into frame 0 and `delta_ts[i-1]` is how long before
/// frame 0 frame `i` was captured. `object_translations[j][i-1]` is the
/// displacement of object `j` from frame `i` to frame 0 in frame-0
/// coordinates; objects missing from the map use the minimum range.
#[derive(Debug, Clone)]
pub struct StabilityContext {
    frames: Vec<PointCloudFrame>,
    transforms: Vec<RigidTransform>,
    delta_ts: Vec<f64>,
    object_translations: BTreeMap<u32, Vec<Vec3>>,
    min_range: f64,
    percentile: f64,
}

impl StabilityContext {
    pub fn new(
        frames: Vec<PointCloudFrame>,
        transforms: Vec<RigidTransform>,
        delta_ts: Vec<f64>,
        object_translations: BTreeMap<u32, Vec<Vec3>>,
        min_range: f64,
        percentile: f64,
    ) -> Result<Self, SpuriousError> {
        let f = frames.len();
        if f < 2 {
            return Err(SpuriousError::TooFewFrames { frames: f });
        }
        if transforms.len() != f - 1 {
            return Err(SpuriousError::LengthMismatch {
                what: "transforms",
                expected: f - 1,
                got: transforms.len(),
            });
        }
        if delta_ts.len() != f - 1 {
            return Err(SpuriousError::LengthMismatch {
                what: "time offsets",
                expected: f - 1,
                got: delta_ts.len(),
            });
        }
        if let Some((i, &dt)) = delta_ts.iter().enumerate().find(|(_, dt)| !(**dt > 0.0)) {
            return Err(SpuriousError::NonPositiveDt { index: i + 1, dt });
        }
        for d in object_translations.values() {
            if d.len() != f - 1 {
                return Err(SpuriousError::LengthMismatch {
                    what: "object translations",
                    expected: f - 1,
                    got: d.len(),
                });
            }
        }
        if !(min_range.is_finite() && min_range > 0.0) {
            return Err(SpuriousError::InvalidParameter(
                "minimum range must be positive",
            ));
        }
        if !(percentile > 0.0 && percentile <= 100.0) {
            return Err(SpuriousError::InvalidParameter(
                "percentile must be in (0, 100]",
            ));
        }
        Ok(Self {
            frames,
            transforms,
            delta_ts,
            object_translations,
            min_range,
            percentile,
        })
    }

    pub fn frames(&self) -> &[PointCloudFrame] {
        &self.frames
    }

    pub fn transforms(&self) -> &[RigidTransform] {
        &self.transforms
    }

    pub fn delta_ts(&self) -> &[f64] {
        &self.delta_ts
    }

    pub fn object_translations(&self) -> &BTreeMap<u32, Vec<Vec3>> {
        &self.object_translations
    }

    pub fn min_range(&self) -> f64 {
        self.min_range
    }

    pub fn percentile(&self) -> f64 {
        self.percentile
    }

    /// Time covered by the window, from the oldest frame to the current one.
    pub fn span(&self) -> f64 {
        self.delta_ts.iter().copied().fold(0.0, f64::max)
    }

    /// Radar displacement from frame `i` to frame 0, expressed in frame 0.
    fn ego_displacement(&self, i: usize) -> RigidTransform {
        let t = &self.transforms[i - 1];
        RigidTransform::new(t.rotation().transpose(), -t.translation())
            .unwrap_or_else(|_| t.inverse())
    }
}

/// Velocity implied by a displacement `t.translation()` over `dt` seconds.
pub fn radar_velocity(t: &RigidTransform, dt: f64) -> Result<Vec3, SpuriousError> {
    if !(dt > 0.0) {
        return Err(SpuriousError::NonPositiveDt { index: 0, dt });
    }
    Ok(t.translation() / dt)
}

/// Velocity of the radar relative to an object that moved by
/// `displacement` over `dt` seconds.
pub fn dynamic_point_velocity(
    displacement: &Vec3,
    dt: f64,
    radar: &Vec3,
) -> Result<Vec3, SpuriousError> {
    if !(dt > 0.0) {
        return Err(SpuriousError::NonPositiveDt { index: 0, dt });
    }
    Ok(radar - displacement / dt)
}

/// Neighbourhood radius per point class.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodRanges {
    /// Used for background and unknown points.
    pub background: f64,
    /// Per-object radius; objects without an entry use `fallback`.
    pub objects: BTreeMap<u32, f64>,
    pub fallback: f64,
}

impl NeighborhoodRanges {
    /// Every class pinned to the same radius.
    pub fn fixed(range: f64) -> Self {
        Self {
            background: range,
            objects: BTreeMap::new(),
            fallback: range,
        }
    }

    pub fn for_label(&self, label: PointLabel) -> f64 {
        match label {
            PointLabel::Background | PointLabel::Unknown => self.background,
            PointLabel::Dynamic(j) => self.objects.get(&j).copied().unwrap_or(self.fallback),
        }
    }

    /// Every range multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            background: self.background * factor,
            objects: self.objects.iter().map(|(j, r)| (*j, r * factor)).collect(),
            fallback: self.fallback * factor,
        }
    }
}

/// Mean background velocity and per-object mean relative velocities over
/// the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowVelocities {
    pub background: Vec3,
    pub objects: BTreeMap<u32, Vec3>,
}

pub fn window_velocities(ctx: &StabilityContext) -> Result<WindowVelocities, SpuriousError> {
    let mut background = Vec::new();
    let mut per_object: BTreeMap<u32, Vec<Vec3>> = BTreeMap::new();
    for i in 1..ctx.frames.len() {
        let dt = ctx.delta_ts[i - 1];
        let v_radar = radar_velocity(&ctx.ego_displacement(i), dt)
            .map_err(|_| SpuriousError::NonPositiveDt { index: i, dt })?;
        background.push(v_radar);
        let mut present: Vec<u32> = ctx.frames[i]
            .labels
            .iter()
            .filter_map(|l| match l {
                PointLabel::Dynamic(j) => Some(*j),
                _ => None,
            })
            .collect();
        present.sort_unstable();
        present.dedup();
        for j in present {
            if let Some(d) = ctx.object_translations.get(&j) {
                let v = dynamic_point_velocity(&d[i - 1], dt, &v_radar)?;
                per_object.entry(j).or_default().push(v);
            }
        }
    }
    let mean = |v: &[Vec3]| v.iter().sum::<Vec3>() / v.len() as f64;
    Ok(WindowVelocities {
        background: mean(&background),
        objects: per_object.iter().map(|(j, v)| (*j, mean(v))).collect(),
    })
}

/// Adaptive radii `max(d₀, ½ ‖v‖ Δt)` with `Δt` the window span.
pub fn neighborhood_ranges(ctx: &StabilityContext) -> Result<NeighborhoodRanges, SpuriousError> {
    let velocities = window_velocities(ctx)?;
    let span = ctx.span();
    let range = |v: &Vec3| ctx.min_range.max(0.5 * v.norm() * span);
    Ok(NeighborhoodRanges {
        background: range(&velocities.background),
        objects: velocities
            .objects
            .iter()
            .map(|(j, v)| (*j, range(v)))
            .collect(),
        fallback: ctx.min_range,
    })
}

/// A point of the stacked window with the index of the frame it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackedPoint {
    pub position: Vec3,
    pub frame: usize,
    pub label: PointLabel,
}

/// Frame 0's points followed by every older frame's points mapped into
/// frame 0.
pub fn superimpose(ctx: &StabilityContext) -> Vec<StackedPoint> {
    let mut out = Vec::with_capacity(ctx.frames.iter().map(PointCloudFrame::len).sum());
    for (i, frame) in ctx.frames.iter().enumerate() {
        let t = if i == 0 {
            RigidTransform::identity()
        } else {
            ctx.transforms[i - 1]
        };
        out.extend(
            frame
                .points
                .iter()
                .zip(&frame.labels)
                .map(|(p, l)| StackedPoint {
                    position: if i == 0 { *p } else { t.apply(p) },
                    frame: i,
                    label: *l,
                }),
        );
    }
    out
}

/// Neighbour counts of every frame-0 point over the stacked window, using
/// the given radii and excluding the point itself.
pub fn count_neighbors(ctx: &StabilityContext, ranges: &NeighborhoodRanges) -> Vec<usize> {
    let stacked: Vec<Vec3> = superimpose(ctx).iter().map(|s| s.position).collect();
    let current = &ctx.frames[0];
    let mut radii: Vec<f64> = current
        .labels
        .iter()
        .map(|l| ranges.for_label(*l))
        .collect::<Vec<_>>();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let grids: Vec<(f64, UniformGrid<'_>)> = radii
        .iter()
        .map(|&r| (r, UniformGrid::new(&stacked, r.max(1e-6))))
        .collect();
    current
        .points
        .par_iter()
        .zip(&current.labels)
        .enumerate()
        .map(|(i, (p, l))| {
            let r = ranges.for_label(*l);
            let grid = &grids
                .iter()
                .find(|(gr, _)| *gr == r)
                .expect("grid per radius")
                .1;
            // Frame-0 points come first in the stack, so index i is p itself.
            grid.count_within(p, r, Some(i))
        })
        .collect()
}

/// Nearest-rank percentile of `values` (`p` in (0, 100]).
pub fn nearest_rank_percentile(values: &[usize], p: f64) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Flags points whose count is strictly below the percentile threshold.
pub fn flag_low_counts(counts: &[usize], percentile: f64) -> Vec<bool> {
    match nearest_rank_percentile(counts, percentile) {
        Some(threshold) => counts.iter().map(|&n| n < threshold).collect(),
        None => Vec::new(),
    }
}

/// Result of a stability check on the current frame.
#[derive(Debug, Clone)]
pub struct StabilityOutcome {
    pub frame: PointCloudFrame,
    pub counts: Vec<usize>,
    pub ranges: NeighborhoodRanges,
}

/// Runs the check with explicit radii.
pub fn mark_spurious_with_ranges(
    ctx: &StabilityContext,
    ranges: NeighborhoodRanges,
) -> StabilityOutcome {
    let counts = count_neighbors(ctx, &ranges);
    let flags = flag_low_counts(&counts, ctx.percentile);
    let frame = ctx.frames[0]
        .clone()
        .with_spurious(flags)
        .expect("one flag per frame-0 point");
    StabilityOutcome {
        frame,
        counts,
        ranges,
    }
}

/// Runs the check with velocity-adaptive radii.
pub fn mark_spurious(ctx: &StabilityContext) -> Result<StabilityOutcome, SpuriousError> {
    let ranges = neighborhood_ranges(ctx)?;
    Ok(mark_spurious_with_ranges(ctx, ranges))
}
