//! The `simulate`, `run` and `cfar` commands.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use mmrefine::cfar::{
    ca_cfar_with, detections_to_points, os_cfar_with, CfarError, RangeDopplerMatrix, Threshold,
};
use mmrefine::geometry::Vec3;
use mmrefine::metrics::MetricReport;
use mmrefine::sim::export::load_truth_cloud;
use mmrefine::sim::scene::radar_to_body;
use mmrefine::sim::{export, generate, SceneConfig, SimError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CfarMode, Detector};
use crate::output::{RunManifest, RunWriter};
use crate::pipeline::{self, RunInputs, Summary};
use crate::{CliError, RunConfig};

/// Counts printed after a scene is written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub frames: usize,
    pub objects: u32,
    pub radar_points: usize,
    pub mirror_points: usize,
    pub feature_tracks: usize,
    pub range_doppler_matrices: usize,
    pub files: usize,
    pub groups: usize,
}

pub fn load_scene_config(path: Option<&Path>) -> Result<SceneConfig, CliError> {
    let Some(path) = path else {
        return Ok(SceneConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Config(format!("{}: {e}", path.display())),
        _ => CliError::Io(format!("{}: {e}", path.display())),
    })?;
    SceneConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Generates a scene and writes it to `out`.
pub fn simulate(cfg: &SceneConfig, out: &Path) -> Result<SceneSummary, CliError> {
    let scene = generate(cfg).map_err(|e| match e {
        SimError::InvalidConfig(_) | SimError::Parse { .. } => CliError::Config(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    let manifest = export(&scene, out).map_err(|e| CliError::write(out, e))?;
    let obs = &scene.observations;
    let summary = SceneSummary {
        frames: obs.timestamps.len(),
        objects: obs.objects,
        radar_points: obs.clouds.iter().map(|c| c.len()).sum(),
        mirror_points: scene
            .truth
            .provenance
            .iter()
            .flatten()
            .filter(|p| p.is_mirror())
            .count(),
        feature_tracks: obs.pairs.iter().map(|p| p.tracks.len()).sum(),
        range_doppler_matrices: obs.rdms.len(),
        files: manifest.files.len(),
        groups: manifest.groups.len(),
    };
    info!("wrote scene to {}", out.display());
    Ok(summary)
}

/// Runs the refinement pipeline and writes per-frame and aggregate reports.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<(Summary, RunManifest), CliError> {
    let inputs = RunInputs::load(&cfg.scene)?;
    let result = pipeline::run(&inputs, cfg);
    let mut w = RunWriter::create(out)?;
    w.json("config.json", cfg)?;
    for frame in &result.frames {
        w.json(&format!("frames/frame_{:04}.json", frame.frame), frame)?;
    }
    w.json("aggregate.json", &[&result.summary])?;
    let manifest = w.finish("run")?;
    Ok((result.summary, manifest))
}

/// Detection statistics of one threshold setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfarSetting {
    pub label: String,
    pub threshold: Threshold,
    /// Detections per frame.
    pub points: Vec<usize>,
    pub total_points: usize,
    /// Detections over cells under test, all frames together.
    pub detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfarReport {
    pub detector: Detector,
    pub mode: CfarMode,
    pub frames: usize,
    pub cells_tested: usize,
    pub settings: Vec<CfarSetting>,
}

/// Reads every stored range-Doppler matrix of a scene, in frame order.
pub fn load_rdms(scene: &Path) -> Result<Vec<RangeDopplerMatrix>, CliError> {
    let dir = scene.join("rdm");
    let entries =
        fs::read_dir(&dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let mut sidecars: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    if sidecars.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no range-Doppler matrices",
            dir.display()
        )));
    }
    sidecars
        .iter()
        .map(|p| {
            RangeDopplerMatrix::load(p).map_err(|e| match e {
                CfarError::Io(io) if io.kind() != std::io::ErrorKind::NotFound => {
                    CliError::Io(format!("{}: {io}", p.display()))
                }
                other => CliError::Input(format!("{}: {other}", p.display())),
            })
        })
        .collect()
}

fn detect(
    cfg: &RunConfig,
    rdm: &RangeDopplerMatrix,
    threshold: Threshold,
) -> Result<Vec<Vec3>, CliError> {
    let c = &cfg.cfar;
    let dets = match c.detector {
        Detector::Ca => ca_cfar_with(rdm, c.window, threshold),
        Detector::Os => os_cfar_with(rdm, c.window, c.rank(), threshold),
    }
    .map_err(|e| CliError::Config(format!("cfar: {e}")))?;
    let points = detections_to_points(&dets, rdm).map_err(|e| CliError::Input(e.to_string()))?;
    Ok(points.iter().map(radar_to_body).collect())
}

fn setting_label(cfg: &RunConfig, threshold: Threshold) -> String {
    let name = match cfg.cfar.detector {
        Detector::Ca => "ca_cfar",
        Detector::Os => "os_cfar",
    };
    match threshold {
        Threshold::Pfa(p) => format!("{name} pfa {p}"),
        Threshold::OffsetDb(db) => format!("{name} {db} dB"),
    }
}

/// Runs the configured CFAR detector over every frame of a scene.
///
/// Pfa mode produces one setting; offset mode one per swept threshold.
pub fn cfar(
    cfg: &RunConfig,
    out: &Path,
) -> Result<(CfarReport, Vec<Summary>, RunManifest), CliError> {
    let rdms = load_rdms(&cfg.scene)?;
    if let Some(k) = rdms.iter().position(|r| r.angle_map().is_none()) {
        return Err(CliError::Input(format!(
            "{}: frame {k} has no angle map",
            cfg.scene.display()
        )));
    }
    let context = cfg.scene.display().to_string();
    let truth: Vec<Vec<Vec3>> = (0..rdms.len())
        .map(|k| {
            load_truth_cloud(&cfg.scene, k)
                .map(|(p, _)| p)
                .map_err(|e| CliError::read(&context, e))
        })
        .collect::<Result<_, _>>()?;

    let thresholds: Vec<Threshold> = match cfg.cfar.mode {
        CfarMode::Pfa => vec![Threshold::Pfa(cfg.cfar.pfa)],
        CfarMode::DbOffset => cfg
            .cfar
            .sweep_db
            .iter()
            .map(|&db| Threshold::OffsetDb(db))
            .collect(),
    };
    let reach = cfg.cfar.window.guard + cfg.cfar.window.train;
    let cells_tested: usize = rdms
        .iter()
        .map(|r| {
            r.range_bins().saturating_sub(2 * reach) * r.doppler_bins().saturating_sub(2 * reach)
        })
        .sum();

    let mut w = RunWriter::create(out)?;
    w.json("config.json", cfg)?;
    let mut settings = Vec::new();
    let mut summaries = Vec::new();
    for (s, &threshold) in thresholds.iter().enumerate() {
        let clouds: Vec<Vec<Vec3>> = rdms
            .par_iter()
            .map(|rdm| detect(cfg, rdm, threshold))
            .collect::<Result<_, _>>()?;
        let mut scored = Vec::new();
        let mut failures = 0;
        for (k, cloud) in clouds.iter().enumerate() {
            let rel = match cfg.cfar.mode {
                CfarMode::Pfa => format!("clouds/frame_{k:04}.csv"),
                CfarMode::DbOffset => format!("clouds/setting_{s:02}/frame_{k:04}.csv"),
            };
            w.bytes(&rel, points_csv(cloud).as_bytes())?;
            match MetricReport::evaluate(cloud, &truth[k], cfg.metrics.delta) {
                Ok(m) => scored.push((k, m, cloud.len())),
                Err(_) => failures += 1,
            }
        }
        let label = setting_label(cfg, threshold);
        let points: Vec<usize> = clouds.iter().map(Vec::len).collect();
        let total_points = points.iter().sum();
        summaries.push(Summary::from_frames(label.clone(), &scored, failures));
        settings.push(CfarSetting {
            label,
            threshold,
            points,
            total_points,
            detection_rate: if cells_tested > 0 {
                total_points as f64 / cells_tested as f64
            } else {
                0.0
            },
        });
    }
    let report = CfarReport {
        detector: cfg.cfar.detector,
        mode: cfg.cfar.mode,
        frames: rdms.len(),
        cells_tested,
        settings,
    };
    w.json("cfar.json", &report)?;
    w.json("aggregate.json", &summaries)?;
    let manifest = w.finish("cfar")?;
    Ok((report, summaries, manifest))
}

fn points_csv(points: &[Vec3]) -> String {
    let mut s = String::from("x,y,z\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
    }
    s
}
