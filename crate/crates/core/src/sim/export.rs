//! On-disk scene layout and its loader.
//!
//! ```text
//! scene/
//!   manifest.json
//!   clouds/  frame_0000.csv, flow_0001.csv, frames.json
//!   tracks/  pair_0001.csv, camera.json
//!   poses/   vi.csv, inertial.csv, truth.csv
//!   rdm/     frame_0000.{bin,az.bin,el.bin,json}
//!   truth/   cloud_0000.csv, provenance_0000.csv, features_0001.csv,
//!            pairs.csv, translations.csv, scene.json
//! ```
//!
//! Pair files are numbered by their later frame.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{
    GroundTruth, Observations, PairObservation, PairTruth, Provenance, Scene, SceneConfig,
};
use super::SimError;
use crate::cfar::RangeDopplerMatrix;
use crate::geometry::{CameraIntrinsics, FeatureTrack, PixelHomogeneous, RigidTransform, Vec3};
use crate::motion::{PoseStream, ScenePointSet};
use crate::spurious::{PointCloudFrame, PointLabel};

pub const FORMAT: &str = "mmrefine-scene v1";
pub const GROUPS: [&str; 5] = ["clouds", "tracks", "poses", "rdm", "truth"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub frames: usize,
    pub objects: u32,
    /// File paths per group, relative to the scene directory.
    pub groups: BTreeMap<String, Vec<String>>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FramesIndex {
    objects: u32,
    timestamps: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRow {
    x: f64,
    y: f64,
    z: f64,
    fx: f64,
    fy: f64,
    fz: f64,
    moving_prob: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRow {
    object_id: u32,
    u_prev: f64,
    v_prev: f64,
    u_curr: f64,
    v_curr: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    x: f64,
    y: f64,
    z: f64,
    label: i64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProvenanceRow {
    kind: String,
    source: usize,
    /// −1 for real returns.
    reflector: i64,
    sx: f64,
    sy: f64,
    sz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRow {
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    pair: usize,
    tx: f64,
    ty: f64,
    tz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TranslationRow {
    pair: usize,
    object_id: u32,
    dx: f64,
    dy: f64,
    dz: f64,
}

fn format_err(path: &Path, reason: impl ToString) -> SimError {
    SimError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

struct Writer {
    root: PathBuf,
    groups: BTreeMap<String, Vec<String>>,
}

impl Writer {
    fn path(&self, group: &str, name: &str) -> PathBuf {
        self.root.join(group).join(name)
    }

    fn record(&mut self, group: &str, name: &str) {
        self.groups
            .entry(group.to_string())
            .or_default()
            .push(format!("{group}/{name}"));
    }

    fn bytes(&mut self, group: &str, name: &str, data: &[u8]) -> Result<(), SimError> {
        fs::write(self.path(group, name), data)?;
        self.record(group, name);
        Ok(())
    }

    fn csv<T: Serialize + Columns>(
        &mut self,
        group: &str,
        name: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<(), SimError> {
        let path = self.path(group, name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| format_err(&path, e))?;
        for row in rows {
            w.serialize(row).map_err(|e| format_err(&path, e))?;
        }
        w.flush()?;
        drop(w);
        // Header-only files for empty tables keep the column contract.
        if fs::metadata(&path)?.len() == 0 {
            fs::write(&path, format!("{}\n", T::HEADER))?;
        }
        self.record(group, name);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, group: &str, name: &str, value: &T) -> Result<(), SimError> {
        let text = serde_json::to_string_pretty(value).expect("plain data serializes") + "\n";
        self.bytes(group, name, text.as_bytes())
    }
}

/// Column list written for tables without rows.
trait Columns {
    const HEADER: &'static str;
}

macro_rules! columns {
    ($($row:ty => $header:literal),* $(,)?) => {
        $(impl Columns for $row {
            const HEADER: &'static str = $header;
        })*
    };
}

columns! {
    FlowRow => "x,y,z,fx,fy,fz,moving_prob",
    TrackRow => "object_id,u_prev,v_prev,u_curr,v_curr",
    PointRow => "x,y,z,label",
    ProvenanceRow => "kind,source,reflector,sx,sy,sz",
    FeatureRow => "x,y,z",
    PairRow => "pair,tx,ty,tz,qx,qy,qz,qw",
    TranslationRow => "pair,object_id,dx,dy,dz",
}

/// Size and hex SHA-256 of a file.
pub fn hash_file(path: &Path) -> Result<(u64, String), SimError> {
    let data = fs::read(path)?;
    Ok((data.len() as u64, hex::encode(Sha256::digest(&data))))
}

fn pose_row(pair: usize, t: &RigidTransform) -> PairRow {
    let q = t.quaternion();
    let p = t.translation();
    PairRow {
        pair,
        tx: p.x,
        ty: p.y,
        tz: p.z,
        qx: q.i,
        qy: q.j,
        qz: q.k,
        qw: q.w,
    }
}

/// Writes the scene under `dir` and returns its manifest, which is also
/// saved as `manifest.json`.
pub fn export(scene: &Scene, dir: &Path) -> Result<Manifest, SimError> {
    for g in GROUPS {
        fs::create_dir_all(dir.join(g))?;
    }
    let obs = &scene.observations;
    let truth = &scene.truth;
    let mut w = Writer {
        root: dir.to_path_buf(),
        groups: BTreeMap::new(),
    };

    for (k, cloud) in obs.clouds.iter().enumerate() {
        let mut buf = Vec::new();
        cloud.write_csv(&mut buf)?;
        w.bytes("clouds", &format!("frame_{k:04}.csv"), &buf)?;
    }
    w.json(
        "clouds",
        "frames.json",
        &FramesIndex {
            objects: obs.objects,
            timestamps: obs.timestamps.clone(),
        },
    )?;
    for (i, pair) in obs.pairs.iter().enumerate() {
        let k = i + 1;
        let rows: Vec<FlowRow> = pair
            .flow
            .iter()
            .flat_map(|f| {
                f.points()
                    .iter()
                    .zip(f.flow())
                    .zip(f.moving_prob())
                    .map(|((p, d), m)| FlowRow {
                        x: p.x,
                        y: p.y,
                        z: p.z,
                        fx: d.x,
                        fy: d.y,
                        fz: d.z,
                        moving_prob: *m,
                    })
            })
            .collect();
        w.csv("clouds", &format!("flow_{k:04}.csv"), rows)?;
        w.csv(
            "tracks",
            &format!("pair_{k:04}.csv"),
            pair.tracks.iter().map(|t| TrackRow {
                object_id: t.object_id,
                u_prev: t.prev_pixel.u,
                v_prev: t.prev_pixel.v,
                u_curr: t.curr_pixel.u,
                v_curr: t.curr_pixel.v,
            }),
        )?;
    }
    let k = obs.intrinsics;
    w.json(
        "tracks",
        "camera.json",
        &CameraFile {
            fx: k.fx(),
            fy: k.fy(),
            cx: k.cx(),
            cy: k.cy(),
            width: obs.image_size.0,
            height: obs.image_size.1,
        },
    )?;

    for (name, stream) in [
        ("inertial.csv", &obs.inertial_poses),
        ("truth.csv", &truth.poses),
        ("vi.csv", &obs.vi_poses),
    ] {
        let mut buf = Vec::new();
        stream.write_csv(&mut buf)?;
        w.bytes("poses", name, &buf)?;
    }

    for (k, rdm) in obs.rdms.iter().enumerate() {
        let written = rdm.save(&dir.join("rdm"), &format!("frame_{k:04}"))?;
        for path in written {
            let name = path
                .file_name()
                .expect("file")
                .to_string_lossy()
                .into_owned();
            w.record("rdm", &name);
        }
    }

    for (k, (points, labels)) in truth.clouds.iter().zip(&truth.cloud_labels).enumerate() {
        w.csv(
            "truth",
            &format!("cloud_{k:04}.csv"),
            points.iter().zip(labels).map(|(p, l)| PointRow {
                x: p.x,
                y: p.y,
                z: p.z,
                label: l.code(),
            }),
        )?;
        w.csv(
            "truth",
            &format!("provenance_{k:04}.csv"),
            truth.provenance[k].iter().map(|p| match *p {
                Provenance::Real { source } => ProvenanceRow {
                    kind: "real".into(),
                    source,
                    reflector: -1,
                    sx: 0.0,
                    sy: 0.0,
                    sz: 0.0,
                },
                Provenance::Mirror {
                    source,
                    reflector,
                    source_position: s,
                } => ProvenanceRow {
                    kind: "mirror".into(),
                    source,
                    reflector: reflector as i64,
                    sx: s.x,
                    sy: s.y,
                    sz: s.z,
                },
            }),
        )?;
    }
    for (i, pair) in truth.pairs.iter().enumerate() {
        w.csv(
            "truth",
            &format!("features_{:04}.csv", i + 1),
            pair.features.iter().map(|p| FeatureRow {
                x: p.x,
                y: p.y,
                z: p.z,
            }),
        )?;
    }
    w.csv(
        "truth",
        "pairs.csv",
        truth
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| pose_row(i + 1, &p.camera_pose)),
    )?;
    w.csv(
        "truth",
        "translations.csv",
        truth.pairs.iter().enumerate().flat_map(|(i, p)| {
            p.translations.iter().map(move |(j, d)| TranslationRow {
                pair: i + 1,
                object_id: *j,
                dx: d.x,
                dy: d.y,
                dz: d.z,
            })
        }),
    )?;
    w.bytes("truth", "scene.json", scene.config.to_json().as_bytes())?;

    let mut files = Vec::new();
    for paths in w.groups.values_mut() {
        paths.sort();
        for p in paths.iter() {
            let (bytes, sha256) = hash_file(&dir.join(p))?;
            files.push(FileEntry {
                path: p.clone(),
                bytes,
                sha256,
            });
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        format: FORMAT.to_string(),
        seed: scene.config.seed,
        frames: obs.timestamps.len(),
        objects: obs.objects,
        groups: w.groups,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SimError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e))?;
    if manifest.format != FORMAT {
        return Err(format_err(
            &path,
            format!("unknown format `{}`", manifest.format),
        ));
    }
    Ok(manifest)
}

/// Checks every listed file against its recorded size and hash.
pub fn verify_manifest(dir: &Path) -> Result<Manifest, SimError> {
    let manifest = read_manifest(dir)?;
    for entry in &manifest.files {
        let (bytes, sha) = hash_file(&dir.join(&entry.path))?;
        if bytes != entry.bytes || sha != entry.sha256 {
            return Err(SimError::HashMismatch {
                path: entry.path.clone(),
            });
        }
    }
    Ok(manifest)
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => SimError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            path.display().to_string(),
        )),
        _ => format_err(path, e),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| format_err(path, e)))
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SimError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

fn pose_from_row(path: &Path, r: &PairRow) -> Result<RigidTransform, SimError> {
    let q = nalgebra::Quaternion::new(r.qw, r.qx, r.qy, r.qz);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(format_err(
            path,
            format!("pair {}: quaternion is not unit", r.pair),
        ));
    }
    Ok(RigidTransform::from_quaternion(
        nalgebra::UnitQuaternion::from_quaternion(q),
        Vec3::new(r.tx, r.ty, r.tz),
    ))
}

/// Reads observations only, as the pipeline sees them.
pub fn load_observations(dir: &Path) -> Result<Observations, SimError> {
    let index: FramesIndex = read_json(&dir.join("clouds/frames.json"))?;
    let mut clouds = Vec::with_capacity(index.timestamps.len());
    for (k, &t) in index.timestamps.iter().enumerate() {
        let path = dir.join(format!("clouds/frame_{k:04}.csv"));
        let file = fs::File::open(&path)?;
        clouds.push(PointCloudFrame::read_csv(file, t, index.objects)?);
    }
    let camera: CameraFile = read_json(&dir.join("tracks/camera.json"))?;
    let intrinsics = CameraIntrinsics::new(camera.fx, camera.fy, camera.cx, camera.cy)
        .map_err(|e| format_err(&dir.join("tracks/camera.json"), e))?;
    let mut pairs = Vec::new();
    for k in 1..index.timestamps.len() {
        let tracks = read_rows::<TrackRow>(&dir.join(format!("tracks/pair_{k:04}.csv")))?
            .into_iter()
            .map(|r| {
                FeatureTrack::new(
                    PixelHomogeneous::new(r.u_prev, r.v_prev),
                    PixelHomogeneous::new(r.u_curr, r.v_curr),
                    r.object_id,
                )
            })
            .collect();
        let rows = read_rows::<FlowRow>(&dir.join(format!("clouds/flow_{k:04}.csv")))?;
        let flow = if rows.is_empty() {
            None
        } else {
            Some(ScenePointSet::new(
                rows.iter().map(|r| Vec3::new(r.x, r.y, r.z)).collect(),
                rows.iter().map(|r| Vec3::new(r.fx, r.fy, r.fz)).collect(),
                rows.iter().map(|r| r.moving_prob).collect(),
            )?)
        };
        pairs.push(PairObservation { tracks, flow });
    }
    let vi_poses = PoseStream::load(&dir.join("poses/vi.csv"))?;
    let inertial_poses = PoseStream::load(&dir.join("poses/inertial.csv"))?;
    let mut rdms = Vec::new();
    for k in 0..index.timestamps.len() {
        let sidecar = dir.join(format!("rdm/frame_{k:04}.json"));
        if !sidecar.exists() {
            break;
        }
        rdms.push(RangeDopplerMatrix::load(&sidecar)?);
    }
    Ok(Observations {
        intrinsics,
        image_size: (camera.width, camera.height),
        timestamps: index.timestamps,
        clouds,
        pairs,
        vi_poses,
        inertial_poses,
        rdms,
        objects: index.objects,
    })
}

/// Reads one truth cloud.
pub fn load_truth_cloud(
    dir: &Path,
    frame: usize,
) -> Result<(Vec<Vec3>, Vec<PointLabel>), SimError> {
    let path = dir.join(format!("truth/cloud_{frame:04}.csv"));
    let rows = read_rows::<PointRow>(&path)?;
    let mut points = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for r in rows {
        points.push(Vec3::new(r.x, r.y, r.z));
        labels.push(
            PointLabel::from_code(r.label)
                .ok_or_else(|| format_err(&path, format!("bad label {}", r.label)))?,
        );
    }
    Ok((points, labels))
}

/// Reads a complete scene written by [`export`].
pub fn load(dir: &Path) -> Result<Scene, SimError> {
    let config = SceneConfig::from_json(&fs::read_to_string(dir.join("truth/scene.json"))?)?;
    let observations = load_observations(dir)?;
    let frames = observations.timestamps.len();

    let mut clouds = Vec::new();
    let mut cloud_labels = Vec::new();
    let mut provenance = Vec::new();
    for k in 0..frames {
        let (points, labels) = load_truth_cloud(dir, k)?;
        clouds.push(points);
        cloud_labels.push(labels);
        let path = dir.join(format!("truth/provenance_{k:04}.csv"));
        provenance.push(
            read_rows::<ProvenanceRow>(&path)?
                .into_iter()
                .map(|r| match r.kind.as_str() {
                    "real" => Ok(Provenance::Real { source: r.source }),
                    "mirror" => Ok(Provenance::Mirror {
                        source: r.source,
                        reflector: usize::try_from(r.reflector)
                            .map_err(|_| format_err(&path, "mirror without reflector"))?,
                        source_position: Vec3::new(r.sx, r.sy, r.sz),
                    }),
                    other => Err(format_err(&path, format!("unknown provenance `{other}`"))),
                })
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    let pairs_path = dir.join("truth/pairs.csv");
    let poses = read_rows::<PairRow>(&pairs_path)?;
    let translations = read_rows::<TranslationRow>(&dir.join("truth/translations.csv"))?;
    let mut pairs = Vec::new();
    for row in &poses {
        let features =
            read_rows::<FeatureRow>(&dir.join(format!("truth/features_{:04}.csv", row.pair)))?
                .into_iter()
                .map(|r| Vec3::new(r.x, r.y, r.z))
                .collect();
        pairs.push(PairTruth {
            camera_pose: pose_from_row(&pairs_path, row)?,
            features,
            translations: translations
                .iter()
                .filter(|t| t.pair == row.pair)
                .map(|t| (t.object_id, Vec3::new(t.dx, t.dy, t.dz)))
                .collect(),
        });
    }
    let truth_poses = PoseStream::load(&dir.join("poses/truth.csv"))?;
    let frame_poses = observations
        .timestamps
        .iter()
        .map(|&t| truth_poses.pose_at(t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scene {
        truth: GroundTruth {
            poses: truth_poses,
            frame_poses,
            clouds,
            cloud_labels,
            provenance,
            pairs,
            reflectors: config.reflectors.clone(),
        },
        config,
        observations,
    })
}
