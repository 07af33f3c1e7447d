#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A shipped config with top-level fields replaced.
pub fn config_with(name: &str, overrides: &[(&str, Value)]) -> Value {
    let text = std::fs::read_to_string(configs().join(name)).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    for (key, value) in overrides {
        v[*key] = value.clone();
    }
    v
}

pub fn write_json(path: &Path, v: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

pub fn mmrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrefine"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `scene` from a config value and returns its directory.
pub fn simulate(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let cfg_path = write_json(&dir.join(format!("{name}.json")), cfg);
    let out = dir.join(name);
    let o = mmrefine(&["simulate", "--config", s(&cfg_path), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Mean Chamfer distance of a finished run.
pub fn mean_chamfer(run: &Path) -> f64 {
    read_json(&run.join("aggregate.json"))[0]["mean_chamfer"]
        .as_f64()
        .unwrap()
}

/// Runs the pipeline with the given extra flags.
pub fn run(scene: &Path, out: &Path, flags: &[&str]) -> Output {
    let mut args = vec!["run", "--scene", s(scene), "--out", s(out)];
    args.extend_from_slice(flags);
    mmrefine(&args)
}
