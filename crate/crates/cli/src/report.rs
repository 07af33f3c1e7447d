//! Side-by-side comparison of finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use crate::output::{RunManifest, RunWriter};
use crate::pipeline::Summary;
use crate::CliError;

/// One column of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub label: String,
    pub summary: Summary,
}

pub fn read_aggregate(dir: &Path) -> Result<Vec<Summary>, CliError> {
    let path = dir.join("aggregate.json");
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Input(format!("{}: missing", path.display())),
        _ => CliError::Io(format!("{}: {e}", path.display())),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Columns in argument order, then in each run's own order. Labels are
/// prefixed with the directory name when a method appears more than once.
pub fn collect(dirs: &[PathBuf]) -> Result<Vec<Column>, CliError> {
    let mut columns = Vec::new();
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        for summary in read_aggregate(dir)? {
            columns.push((name.clone(), summary));
        }
    }
    let duplicated = |method: &str| columns.iter().filter(|(_, s)| s.method == method).count() > 1;
    Ok(columns
        .iter()
        .map(|(dir, s)| Column {
            label: if duplicated(&s.method) {
                format!("{dir}/{}", s.method)
            } else {
                s.method.clone()
            },
            summary: s.clone(),
        })
        .collect())
}

fn rows(s: &Summary) -> Vec<(&'static str, String)> {
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    vec![
        ("frames", s.frames_evaluated.to_string()),
        ("mean chamfer (m)", num(s.mean_chamfer)),
        ("median chamfer (m)", num(s.median_chamfer)),
        ("mean mod. hausdorff (m)", num(s.mean_modified_hausdorff)),
        (
            "median mod. hausdorff (m)",
            num(s.median_modified_hausdorff),
        ),
        ("mean rpcdl", num(s.mean_rpcdl)),
        ("mean clutter", num(s.mean_clutter_count)),
        ("mean points", num(s.mean_cloud_points)),
        ("failures", s.failures.to_string()),
    ]
}

/// Plain-text table; a single column becomes a key-value listing.
pub fn table(columns: &[Column]) -> String {
    let mut out = String::new();
    if let [only] = columns {
        out.push_str(&format!("method: {}\n", only.label));
        for (key, value) in rows(&only.summary) {
            out.push_str(&format!("{key}: {value}\n"));
        }
        return out;
    }
    let keys: Vec<&str> = rows(&columns[0].summary).iter().map(|(k, _)| *k).collect();
    let cells: Vec<Vec<String>> = columns
        .iter()
        .map(|c| rows(&c.summary).into_iter().map(|(_, v)| v).collect())
        .collect();
    let key_width = keys
        .iter()
        .map(|k| k.len())
        .max()
        .unwrap_or(0)
        .max("metric".len());
    let widths: Vec<usize> = columns
        .iter()
        .zip(&cells)
        .map(|(c, v)| {
            v.iter()
                .map(String::len)
                .max()
                .unwrap_or(0)
                .max(c.label.len())
        })
        .collect();
    out.push_str(&format!("{:<key_width$}", "metric"));
    for (c, w) in columns.iter().zip(&widths) {
        out.push_str(&format!("  {:>w$}", c.label));
    }
    out.push('\n');
    for (r, key) in keys.iter().enumerate() {
        out.push_str(&format!("{key:<key_width$}"));
        for (v, w) in cells.iter().zip(&widths) {
            out.push_str(&format!("  {:>w$}", v[r]));
        }
        out.push('\n');
    }
    out
}

fn density_csv(columns: &[Column]) -> String {
    let mut s = String::from("method,frame,clutter_count,rpcdl\n");
    for c in columns {
        for f in &c.summary.per_frame {
            s.push_str(&format!(
                "{},{},{},{}\n",
                c.label, f.frame, f.clutter_count, f.rpcdl
            ));
        }
    }
    s
}

fn distances_csv(columns: &[Column]) -> String {
    let mut s = String::from("method,frame,chamfer,modified_hausdorff\n");
    for c in columns {
        for f in &c.summary.per_frame {
            s.push_str(&format!(
                "{},{},{},{}\n",
                c.label, f.frame, f.chamfer, f.modified_hausdorff
            ));
        }
    }
    s
}

/// Writes `table.txt`, `density.csv` and `distances.csv`; returns the table.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<(String, RunManifest), CliError> {
    if dirs.is_empty() {
        return Err(CliError::Input("no run directories given".into()));
    }
    let columns = collect(dirs)?;
    if columns.is_empty() {
        return Err(CliError::Input("run directories hold no results".into()));
    }
    let text = table(&columns);
    let mut w = RunWriter::create(out)?;
    w.bytes("table.txt", text.as_bytes())?;
    w.bytes("density.csv", density_csv(&columns).as_bytes())?;
    w.bytes("distances.csv", distances_csv(&columns).as_bytes())?;
    let manifest = w.finish("report")?;
    Ok((text, manifest))
}
