//! Radar point-cloud refinement supervised by visual-inertial geometry.
//!
//! The crate reconstructs dynamic visual features from two-view tracks,
//! estimates radar ego-motion from scene flow, removes multipath ghosts by
//! spatial stability checking, and scores clouds against ground truth. A
//! deterministic simulator supplies every input with its ground truth.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cfar;
pub mod geometry;
pub mod metrics;
pub mod motion;
pub mod reconstruction;
pub mod sim;
pub mod spatial;
pub mod spurious;
