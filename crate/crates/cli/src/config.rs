//! Run configuration, read from JSON.

use std::path::{Path, PathBuf};

use mmrefine::cfar::CfarWindow;
use mmrefine::motion::EkfConfig;
use mmrefine::reconstruction::SolverOptions;
use mmrefine::spurious::{DEFAULT_MIN_RANGE, DEFAULT_PERCENTILE, DEFAULT_WINDOW};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Standard deviation of the radar depth anchor (m).
    pub anchor_sigma: f64,
    /// Smallest number of labelled radar points needed to anchor an object.
    pub min_anchor_points: usize,
    pub max_iterations: usize,
    pub max_restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            anchor_sigma: 0.5,
            min_anchor_points: 3,
            max_iterations: 200,
            max_restarts: 3,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            max_iterations: self.max_iterations,
            max_restarts: self.max_restarts,
            ..SolverOptions::default()
        }
    }
}

/// Depth gate (m, along the optical axis of the later frame) for
/// reconstructed feature points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.5,
            max_depth: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Frames per stability window, the current one included.
    pub window: usize,
    /// Minimum neighbourhood radius (m).
    pub min_range: f64,
    pub percentile: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            min_range: DEFAULT_MIN_RANGE,
            percentile: DEFAULT_PERCENTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// Clutter distance δ (m).
    pub delta: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            delta: mmrefine::metrics::DEFAULT_CLUTTER_DISTANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Ca,
    Os,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfarMode {
    /// One run with the threshold set for a false-alarm probability.
    Pfa,
    /// One run per fixed dB offset in the sweep.
    DbOffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfarConfig {
    pub detector: Detector,
    pub mode: CfarMode,
    pub window: CfarWindow,
    /// Order-statistic rank; three quarters of the ring when absent.
    pub rank: Option<usize>,
    pub pfa: f64,
    /// Offsets (dB) swept in offset mode.
    pub sweep_db: Vec<f64>,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            detector: Detector::Ca,
            mode: CfarMode::Pfa,
            window: CfarWindow::new(1, 2),
            rank: None,
            pfa: 1e-3,
            sweep_db: (1..=8).map(f64::from).collect(),
        }
    }
}

impl CfarConfig {
    pub fn rank(&self) -> usize {
        self.rank
            .unwrap_or_else(|| (3 * self.window.training_cells() / 4).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene directory written by `simulate`.
    pub scene: PathBuf,
    /// Run directory; `--out` takes precedence.
    pub output: Option<PathBuf>,
    pub dynamic_reconstruction: bool,
    pub spurious_filter: bool,
    pub solver: SolverConfig,
    pub features: FeatureConfig,
    pub filter: FilterConfig,
    pub metrics: MetricConfig,
    pub cfar: CfarConfig,
    pub ekf: EkfConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::from("scene"),
            output: None,
            dynamic_reconstruction: true,
            spurious_filter: true,
            solver: SolverConfig::default(),
            features: FeatureConfig::default(),
            filter: FilterConfig::default(),
            metrics: MetricConfig::default(),
            cfar: CfarConfig::default(),
            ekf: EkfConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.filter.window < 2 {
            return bad("filter.window must be at least 2");
        }
        if !(self.filter.min_range > 0.0) {
            return bad("filter.min_range must be positive");
        }
        if !(self.filter.percentile > 0.0 && self.filter.percentile <= 100.0) {
            return bad("filter.percentile must lie in (0, 100]");
        }
        if !(self.features.min_depth >= 0.0 && self.features.max_depth > self.features.min_depth) {
            return bad("features.max_depth must exceed a non-negative features.min_depth");
        }
        if !(self.metrics.delta > 0.0) {
            return bad("metrics.delta must be positive");
        }
        if !(self.cfar.pfa > 0.0 && self.cfar.pfa < 1.0) {
            return bad("cfar.pfa must lie in (0, 1)");
        }
        if self.cfar.mode == CfarMode::DbOffset && self.cfar.sweep_db.is_empty() {
            return bad("cfar.sweep_db is empty");
        }
        if !(self.solver.anchor_sigma > 0.0) {
            return bad("solver.anchor_sigma must be positive");
        }
        Ok(())
    }

    /// Label used for this toggle combination in reports.
    pub fn method_name(&self) -> String {
        match (self.dynamic_reconstruction, self.spurious_filter) {
            (true, true) => "dvir+pr",
            (true, false) => "dvir",
            (false, true) => "pr",
            (false, false) => "baseline",
        }
        .to_string()
    }
}
