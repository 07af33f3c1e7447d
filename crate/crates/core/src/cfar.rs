//! Cell-averaging and order-statistic CFAR detection on range–Doppler
//! matrices, with back-projection of detections to 3D points.
//!
//! Both detectors slide a square ring over the matrix: `guard` cells on each
//! side of the cell under test are skipped and the next `train` cells on
//! each side form the training ring. Only cells whose full window lies
//! inside the matrix are tested.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

/// Smallest matrix side accepted by [`RangeDopplerMatrix::new`].
pub const MIN_BINS: usize = 8;

const ALPHA_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CfarError {
    #[error("invalid range-Doppler matrix: {0}")]
    InvalidMatrix(String),
    #[error("CFAR window of side {side} does not fit in a {rows}×{cols} matrix")]
    WindowTooLarge {
        side: usize,
        rows: usize,
        cols: usize,
    },
    #[error("order-statistic rank {k} is outside 1..={cells}")]
    InvalidRank { k: usize, cells: usize },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("range-Doppler matrix has no angle map")]
    MissingAngleMap,
    #[error("RDM file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-cell azimuth and elevation (radians) for back-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleMap {
    pub azimuth: DMatrix<f64>,
    pub elevation: DMatrix<f64>,
}

/// Linear received power indexed by (range bin, Doppler bin).
#[derive(Debug, Clone, PartialEq)]
pub struct RangeDopplerMatrix {
    power: DMatrix<f64>,
    range_res: f64,
    doppler_res: f64,
    angle_map: Option<AngleMap>,
}

impl RangeDopplerMatrix {
    pub fn new(power: DMatrix<f64>, range_res: f64, doppler_res: f64) -> Result<Self, CfarError> {
        let (r, d) = power.shape();
        if r < MIN_BINS || d < MIN_BINS {
            return Err(CfarError::InvalidMatrix(format!(
                "{r}×{d} is smaller than {MIN_BINS}×{MIN_BINS}"
            )));
        }
        if let Some(v) = power.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(CfarError::InvalidMatrix(format!(
                "power value {v} is negative or not finite"
            )));
        }
        if !(range_res > 0.0 && doppler_res > 0.0) {
            return Err(CfarError::InvalidMatrix(
                "resolutions must be positive".into(),
            ));
        }
        Ok(Self {
            power,
            range_res,
            doppler_res,
            angle_map: None,
        })
    }

    pub fn with_angle_map(mut self, map: AngleMap) -> Result<Self, CfarError> {
        if map.azimuth.shape() != self.power.shape() || map.elevation.shape() != self.power.shape()
        {
            return Err(CfarError::InvalidMatrix(
                "angle map shape differs from power".into(),
            ));
        }
        self.angle_map = Some(map);
        Ok(self)
    }

    pub fn power(&self) -> &DMatrix<f64> {
        &self.power
    }

    pub fn range_bins(&self) -> usize {
        self.power.nrows()
    }

    pub fn doppler_bins(&self) -> usize {
        self.power.ncols()
    }

    pub fn range_res(&self) -> f64 {
        self.range_res
    }

    pub fn doppler_res(&self) -> f64 {
        self.doppler_res
    }

    pub fn angle_map(&self) -> Option<&AngleMap> {
        self.angle_map.as_ref()
    }

    /// Same matrix with every power value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, CfarError> {
        let mut out = Self::new(&self.power * c, self.range_res, self.doppler_res)?;
        out.angle_map = self.angle_map.clone();
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub range_bin: usize,
    pub doppler_bin: usize,
    /// Cell power over the noise estimate, in dB.
    pub snr_db: f64,
    pub position: Option<Vec3>,
}

/// How the detection threshold is derived from the noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Threshold {
    /// Scale factor chosen for this false-alarm probability under
    /// exponential noise.
    Pfa(f64),
    /// Fixed offset above the noise estimate, in dB.
    OffsetDb(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfarWindow {
    pub guard: usize,
    pub train: usize,
}

impl CfarWindow {
    pub fn new(guard: usize, train: usize) -> Self {
        Self { guard, train }
    }

    /// Side length of the full window.
    pub fn side(&self) -> usize {
        2 * (self.guard + self.train) + 1
    }

    /// Number of training cells in the ring.
    pub fn training_cells(&self) -> usize {
        let inner = 2 * self.guard + 1;
        self.side() * self.side() - inner * inner
    }

    fn check(&self, rdm: &RangeDopplerMatrix) -> Result<(), CfarError> {
        if self.train == 0 {
            return Err(CfarError::InvalidThreshold(
                "at least one training cell per side is required".into(),
            ));
        }
        let side = self.side();
        if side > rdm.range_bins() || side > rdm.doppler_bins() {
            return Err(CfarError::WindowTooLarge {
                side,
                rows: rdm.range_bins(),
                cols: rdm.doppler_bins(),
            });
        }
        Ok(())
    }
}

fn check_pfa(pfa: f64) -> Result<(), CfarError> {
    if pfa > 0.0 && pfa < 1.0 {
        Ok(())
    } else {
        Err(CfarError::InvalidThreshold(format!(
            "pfa {pfa} must lie in (0, 1)"
        )))
    }
}

/// CA-CFAR scale factor `N (pfa^(−1/N) − 1)` for `N` training cells.
pub fn ca_alpha(training_cells: usize, pfa: f64) -> f64 {
    let n = training_cells as f64;
    n * (pfa.powf(-1.0 / n) - 1.0)
}

/// False-alarm probability of OS-CFAR with rank `k`, `n` training cells and
/// scale factor `alpha` under exponential noise.
pub fn os_false_alarm(n: usize, k: usize, alpha: f64) -> f64 {
    (0..k)
        .map(|i| {
            let m = (n - i) as f64;
            m / (m + alpha)
        })
        .product()
}

/// OS-CFAR scale factor solving `os_false_alarm(n, k, α) = pfa` by
/// bisection.
pub fn os_alpha(n: usize, k: usize, pfa: f64) -> Result<f64, CfarError> {
    if k == 0 || k > n {
        return Err(CfarError::InvalidRank { k, cells: n });
    }
    check_pfa(pfa)?;
    let (mut lo, mut hi) = (0.0, 1.0);
    while os_false_alarm(n, k, hi) > pfa {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(CfarError::InvalidThreshold(format!(
                "no scale factor reaches pfa {pfa}"
            )));
        }
    }
    while hi - lo > ALPHA_TOL * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if os_false_alarm(n, k, mid) > pfa {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn offset_factor(db: f64) -> Result<f64, CfarError> {
    if db.is_finite() {
        Ok(10f64.powf(db / 10.0))
    } else {
        Err(CfarError::InvalidThreshold(format!(
            "offset {db} dB is not finite"
        )))
    }
}

/// Summed-area table with a zero first row and column.
fn integral(power: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, d) = power.shape();
    let mut s = DMatrix::zeros(r + 1, d + 1);
    for i in 0..r {
        for j in 0..d {
            s[(i + 1, j + 1)] = power[(i, j)] + s[(i, j + 1)] + s[(i + 1, j)] - s[(i, j)];
        }
    }
    s
}

fn box_sum(s: &DMatrix<f64>, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
    // Inclusive bounds.
    s[(r1 + 1, c1 + 1)] - s[(r0, c1 + 1)] - s[(r1 + 1, c0)] + s[(r0, c0)]
}

fn scan(
    rdm: &RangeDopplerMatrix,
    window: &CfarWindow,
    alpha: f64,
    mut noise_at: impl FnMut(usize, usize) -> f64,
) -> Vec<Detection> {
    let reach = window.guard + window.train;
    let (rows, cols) = rdm.power.shape();
    let mut out = Vec::new();
    for r in reach..rows - reach {
        for d in reach..cols - reach {
            let cut = rdm.power[(r, d)];
            if cut <= 0.0 {
                continue;
            }
            let noise = noise_at(r, d);
            if cut > alpha * noise {
                let position = rdm.angle_map.as_ref().map(|m| {
                    back_project(
                        r as f64 * rdm.range_res,
                        m.azimuth[(r, d)],
                        m.elevation[(r, d)],
                    )
                });
                out.push(Detection {
                    range_bin: r,
                    doppler_bin: d,
                    snr_db: 10.0 * (cut / noise).log10(),
                    position,
                });
            }
        }
    }
    out
}

/// CA-CFAR with an explicit threshold mode.
pub fn ca_cfar_with(
    rdm: &RangeDopplerMatrix,
    window: CfarWindow,
    threshold: Threshold,
) -> Result<Vec<Detection>, CfarError> {
    window.check(rdm)?;
    let n = window.training_cells();
    let alpha = match threshold {
        Threshold::Pfa(pfa) => {
            check_pfa(pfa)?;
            ca_alpha(n, pfa)
        }
        Threshold::OffsetDb(db) => offset_factor(db)?,
    };
    let s = integral(&rdm.power);
    let (g, reach) = (window.guard, window.guard + window.train);
    Ok(scan(rdm, &window, alpha, |r, d| {
        let outer = box_sum(&s, r - reach, r + reach, d - reach, d + reach);
        let inner = box_sum(&s, r - g, r + g, d - g, d + g);
        // Clamp rounding residue from the running sums.
        (outer - inner).max(0.0) / n as f64
    }))
}

/// CA-CFAR in false-alarm-probability mode.
pub fn ca_cfar(
    rdm: &RangeDopplerMatrix,
    guard: usize,
    train: usize,
    pfa: f64,
) -> Result<Vec<Detection>, CfarError> {
    ca_cfar_with(rdm, CfarWindow::new(guard, train), Threshold::Pfa(pfa))
}

/// OS-CFAR with an explicit threshold mode; `k` is the 1-based rank of the
/// training sample used as the noise estimate.
pub fn os_cfar_with(
    rdm: &RangeDopplerMatrix,
    window: CfarWindow,
    k: usize,
    threshold: Threshold,
) -> Result<Vec<Detection>, CfarError> {
    window.check(rdm)?;
    let n = window.training_cells();
    if k == 0 || k > n {
        return Err(CfarError::InvalidRank { k, cells: n });
    }
    let alpha = match threshold {
        Threshold::Pfa(pfa) => os_alpha(n, k, pfa)?,
        Threshold::OffsetDb(db) => offset_factor(db)?,
    };
    let (g, reach) = (
        window.guard as isize,
        (window.guard + window.train) as isize,
    );
    let mut ring = Vec::with_capacity(n);
    Ok(scan(rdm, &window, alpha, |r, d| {
        ring.clear();
        for dr in -reach..=reach {
            for dd in -reach..=reach {
                if dr.abs() <= g && dd.abs() <= g {
                    continue;
                }
                ring.push(rdm.power[((r as isize + dr) as usize, (d as isize + dd) as usize)]);
            }
        }
        *ring.select_nth_unstable_by(k - 1, f64::total_cmp).1
    }))
}

pub fn os_cfar(
    rdm: &RangeDopplerMatrix,
    guard: usize,
    train: usize,
    k: usize,
    pfa: f64,
) -> Result<Vec<Detection>, CfarError> {
    os_cfar_with(rdm, CfarWindow::new(guard, train), k, Threshold::Pfa(pfa))
}

/// Radar-frame position (x right, y boresight, z up) of a return at
/// `range` metres and the given azimuth/elevation.
pub fn back_project(range: f64, azimuth: f64, elevation: f64) -> Vec3 {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vec3::new(range * ce * sa, range * ce * ca, range * se)
}

/// Positions of detections using the matrix's angle map.
pub fn detections_to_points(
    dets: &[Detection],
    rdm: &RangeDopplerMatrix,
) -> Result<Vec<Vec3>, CfarError> {
    let map = rdm.angle_map.as_ref().ok_or(CfarError::MissingAngleMap)?;
    dets.iter()
        .map(|det| {
            let (r, d) = (det.range_bin, det.doppler_bin);
            if r >= rdm.range_bins() || d >= rdm.doppler_bins() {
                return Err(CfarError::InvalidMatrix(format!(
                    "detection ({r}, {d}) is outside the matrix"
                )));
            }
            Ok(back_project(
                r as f64 * rdm.range_res,
                map.azimuth[(r, d)],
                map.elevation[(r, d)],
            ))
        })
        .collect()
}

/// JSON sidecar describing one stored matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdmHeader {
    /// `RDM v1 R D range_res doppler_res`.
    pub header: String,
    pub power: String,
    pub azimuth: Option<String>,
    pub elevation: Option<String>,
}

fn write_plane<W: Write>(mut w: W, m: &DMatrix<f64>) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(m.len() * 4);
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

fn read_plane<R: Read>(mut rd: R, rows: usize, cols: usize) -> Result<DMatrix<f64>, CfarError> {
    let mut bytes = Vec::new();
    rd.read_to_end(&mut bytes)?;
    if bytes.len() != rows * cols * 4 {
        return Err(CfarError::Format(format!(
            "expected {} bytes for a {rows}×{cols} plane, found {}",
            rows * cols * 4,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

impl RangeDopplerMatrix {
    /// Writes `<stem>.bin` (and `<stem>.az.bin`, `<stem>.el.bin` when an
    /// angle map is present) plus `<stem>.json` into `dir`. Returns the paths
    /// written, sidecar last.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, CfarError> {
        let mut written = Vec::new();
        let power_name = format!("{stem}.bin");
        write_plane(std::fs::File::create(dir.join(&power_name))?, &self.power)?;
        written.push(dir.join(&power_name));
        let (mut azimuth, mut elevation) = (None, None);
        if let Some(map) = &self.angle_map {
            let az = format!("{stem}.az.bin");
            let el = format!("{stem}.el.bin");
            write_plane(std::fs::File::create(dir.join(&az))?, &map.azimuth)?;
            write_plane(std::fs::File::create(dir.join(&el))?, &map.elevation)?;
            written.push(dir.join(&az));
            written.push(dir.join(&el));
            azimuth = Some(az);
            elevation = Some(el);
        }
        let header = RdmHeader {
            header: format!(
                "RDM v1 {} {} {} {}",
                self.range_bins(),
                self.doppler_bins(),
                self.range_res,
                self.doppler_res
            ),
            power: power_name,
            azimuth,
            elevation,
        };
        let sidecar = dir.join(format!("{stem}.json"));
        let text =
            serde_json::to_string_pretty(&header).map_err(|e| CfarError::Format(e.to_string()))?;
        std::fs::write(&sidecar, text + "\n")?;
        written.push(sidecar);
        Ok(written)
    }

    /// Reads a matrix from its JSON sidecar.
    pub fn load(sidecar: &Path) -> Result<Self, CfarError> {
        let dir = sidecar.parent().unwrap_or(Path::new("."));
        let header: RdmHeader = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
            .map_err(|e| CfarError::Format(e.to_string()))?;
        let fields: Vec<&str> = header.header.split_whitespace().collect();
        let parse_err = || CfarError::Format(format!("bad header line `{}`", header.header));
        if fields.len() != 6 || fields[0] != "RDM" || fields[1] != "v1" {
            return Err(parse_err());
        }
        let rows: usize = fields[2].parse().map_err(|_| parse_err())?;
        let cols: usize = fields[3].parse().map_err(|_| parse_err())?;
        let range_res: f64 = fields[4].parse().map_err(|_| parse_err())?;
        let doppler_res: f64 = fields[5].parse().map_err(|_| parse_err())?;
        let power = read_plane(std::fs::File::open(dir.join(&header.power))?, rows, cols)?;
        let rdm = Self::new(power, range_res, doppler_res)?;
        match (&header.azimuth, &header.elevation) {
            (Some(az), Some(el)) => rdm.with_angle_map(AngleMap {
                azimuth: read_plane(std::fs::File::open(dir.join(az))?, rows, cols)?,
                elevation: read_plane(std::fs::File::open(dir.join(el))?, rows, cols)?,
            }),
            (None, None) => Ok(rdm),
            _ => Err(CfarError::Format(
                "angle map needs both azimuth and elevation planes".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(r: usize, d: usize, v: f64) -> RangeDopplerMatrix {
        RangeDopplerMatrix::new(DMatrix::from_element(r, d, v), 0.5, 0.1).unwrap()
    }

    #[test]
    fn matrix_invariants() {
        assert!(RangeDopplerMatrix::new(DMatrix::zeros(7, 16), 0.5, 0.1).is_err());
        let mut m = DMatrix::zeros(8, 8);
        m[(2, 2)] = -1.0;
        assert!(RangeDopplerMatrix::new(m, 0.5, 0.1).is_err());
    }

    #[test]
    fn zero_power_gives_no_detections() {
        let rdm = flat(16, 16, 0.0);
        assert!(ca_cfar(&rdm, 1, 2, 1e-3).unwrap().is_empty());
        assert!(os_cfar(&rdm, 1, 2, 10, 1e-3).unwrap().is_empty());
    }

    #[test]
    fn window_and_rank_errors() {
        let rdm = flat(8, 8, 1.0);
        assert!(matches!(
            ca_cfar(&rdm, 2, 2, 1e-3),
            Err(CfarError::WindowTooLarge { side: 9, .. })
        ));
        assert!(matches!(
            os_cfar(&rdm, 1, 1, 0, 1e-3),
            Err(CfarError::InvalidRank { .. })
        ));
        assert!(matches!(
            os_cfar(&rdm, 1, 1, 17, 1e-3),
            Err(CfarError::InvalidRank { k: 17, cells: 16 })
        ));
    }

    #[test]
    fn ring_counts() {
        assert_eq!(CfarWindow::new(1, 1).training_cells(), 16);
        assert_eq!(CfarWindow::new(0, 1).training_cells(), 8);
        assert_eq!(CfarWindow::new(2, 3).training_cells(), 121 - 25);
    }

    #[test]
    fn ca_alpha_closed_form() {
        let direct = 16.0 * (100f64.powf(1.0 / 16.0) - 1.0);
        assert!((ca_alpha(16, 1e-2) - direct).abs() < 1e-12);
    }

    #[test]
    fn os_alpha_solves_the_product_equation() {
        let a = os_alpha(24, 18, 1e-3).unwrap();
        assert!((os_false_alarm(24, 18, a) - 1e-3).abs() < 1e-9);
        // With k = 1 the equation is N / (N + α) = pfa.
        let a = os_alpha(16, 1, 0.01).unwrap();
        assert!((a - 16.0 * 99.0).abs() < 1e-5);
    }

    #[test]
    fn boresight_and_zenith_back_projection() {
        let p = back_project(10.0 * 0.5, 0.0, 0.0);
        assert!((p - Vec3::new(0.0, 5.0, 0.0)).norm() < 1e-15);
        let p = back_project(3.0, 0.4, std::f64::consts::FRAC_PI_2);
        assert!((p - Vec3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn missing_angle_map() {
        let rdm = flat(8, 8, 1.0);
        let det = Detection {
            range_bin: 3,
            doppler_bin: 3,
            snr_db: 10.0,
            position: None,
        };
        assert!(matches!(
            detections_to_points(&[det], &rdm),
            Err(CfarError::MissingAngleMap)
        ));
    }

    #[test]
    fn single_target_above_flat_floor() {
        let mut rdm = flat(32, 32, 1.0);
        rdm.power[(16, 10)] = 1e4;
        let dets = ca_cfar(&rdm, 1, 2, 1e-3).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].range_bin, dets[0].doppler_bin), (16, 10));
        assert!((dets[0].snr_db - 40.0).abs() < 1e-9);
    }

    #[test]
    fn offset_mode_uses_decibels() {
        let mut rdm = flat(16, 16, 1.0);
        rdm.power[(8, 8)] = 3.0;
        let w = CfarWindow::new(1, 1);
        assert_eq!(
            ca_cfar_with(&rdm, w, Threshold::OffsetDb(4.0))
                .unwrap()
                .len(),
            1
        );
        assert!(ca_cfar_with(&rdm, w, Threshold::OffsetDb(5.0))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let power = DMatrix::from_fn(8, 9, |r, c| (r * 9 + c) as f64 * 0.25);
        let map = AngleMap {
            azimuth: DMatrix::from_fn(8, 9, |r, _| r as f64 * 0.01),
            elevation: DMatrix::from_fn(8, 9, |_, c| c as f64 * -0.02),
        };
        let rdm = RangeDopplerMatrix::new(power, 0.2, 0.05)
            .unwrap()
            .with_angle_map(map)
            .unwrap();
        let files = rdm.save(dir.path(), "frame_0000").unwrap();
        assert_eq!(files.len(), 4);
        let header = std::fs::read_to_string(dir.path().join("frame_0000.json")).unwrap();
        assert!(header.contains("RDM v1 8 9 0.2 0.05"));
        let back = RangeDopplerMatrix::load(&dir.path().join("frame_0000.json")).unwrap();
        let err = (back.power() - rdm.power()).amax();
        assert!(err <= 1e-6 * rdm.power().amax());
        let az_err =
            (&back.angle_map().unwrap().azimuth - &rdm.angle_map().unwrap().azimuth).amax();
        assert!(az_err < 1e-7);
    }
}
