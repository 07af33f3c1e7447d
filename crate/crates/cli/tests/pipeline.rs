mod common;

use std::fs;

use common::*;
use serde_json::json;

#[test]
fn missing_pose_file_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = simulate(
        tmp.path(),
        "scene",
        &config_with("scene_default.json", &[("duration", json!(0.6))]),
    );
    fs::remove_file(scene.join("poses/inertial.csv")).unwrap();
    let o = run(&scene, &tmp.path().join("r"), &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("inertial.csv"));
}

#[test]
fn missing_scene_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&tmp.path().join("nowhere"), &tmp.path().join("r"), &[]);
    assert_eq!(code(&o), 4);
}

#[test]
fn malformed_cloud_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = simulate(
        tmp.path(),
        "scene",
        &config_with("scene_default.json", &[("duration", json!(0.6))]),
    );
    fs::write(
        scene.join("clouds/frame_0002.csv"),
        "x,y,z,label,spurious\n1,2,oops,0,0\n",
    )
    .unwrap();
    let o = run(&scene, &tmp.path().join("r"), &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn run_writes_frames_aggregate_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = simulate(
        tmp.path(),
        "scene",
        &config_with("scene_crossing.json", &[("duration", json!(0.8))]),
    );
    let out = tmp.path().join("r");
    let o = run(&scene, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Frames 4..=8 have a full five-frame window.
    for k in 4..=8 {
        let f = read_json(&out.join(format!("frames/frame_{k:04}.json")));
        assert_eq!(f["frame"], k);
        assert!(f["metrics"]["chamfer"].as_f64().unwrap() > 0.0);
        assert_eq!(f["objects"].as_array().unwrap().len(), 3);
    }
    assert!(!out.join("frames/frame_0003.json").exists());
    let aggregate = read_json(&out.join("aggregate.json"));
    assert_eq!(aggregate[0]["frames_evaluated"], 5);
    let manifest = read_json(&out.join("manifest.json"));
    let files: Vec<&str> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap())
        .collect();
    assert!(files.contains(&"aggregate.json") && files.contains(&"config.json"));
    assert_eq!(files.len(), 7);
}

#[test]
fn run_rerun_gives_identical_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = simulate(
        tmp.path(),
        "scene",
        &config_with("scene_crossing.json", &[("duration", json!(0.8))]),
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&scene, &a, &["--threads", "1"])), 0);
    assert_eq!(code(&run(&scene, &b, &["--threads", "3"])), 0);
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn failed_solves_fall_back_and_the_run_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = simulate(
        tmp.path(),
        "scene",
        &config_with("scene_crossing.json", &[("duration", json!(0.6))]),
    );
    // Without radar anchors every joint solve is scale-ambiguous.
    let cfg = write_json(
        &tmp.path().join("run.json"),
        &json!({"solver": {"min_anchor_points": 1000000}}),
    );
    let out = tmp.path().join("r");
    let o = mmrefine(&[
        "run",
        "--config",
        s(&cfg),
        "--scene",
        s(&scene),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f = read_json(&out.join("frames/frame_0005.json"));
    for obj in f["objects"].as_array().unwrap() {
        assert_eq!(obj["method"], "fallback");
        assert!(obj["anchor_depth"].is_null());
    }
    assert_eq!(f["failures"].as_array().unwrap().len(), 3);
    assert!(f["metrics"].is_object());
}

#[test]
fn refinement_lowers_chamfer_on_a_dynamic_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = simulate(
        tmp.path(),
        "scene",
        &config_with("scene_crossing.json", &[("duration", json!(1.5))]),
    );
    let (on, off) = (tmp.path().join("on"), tmp.path().join("off"));
    assert_eq!(code(&run(&scene, &on, &[])), 0);
    assert_eq!(code(&run(&scene, &off, &["--no-dvir", "--no-pr"])), 0);
    let (c_on, c_off) = (mean_chamfer(&on), mean_chamfer(&off));
    assert!(c_on < c_off, "on {c_on} off {c_off}");
}

#[test]
fn modules_are_near_no_ops_on_a_clean_static_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = simulate(tmp.path(), "scene", &config_with("scene_static.json", &[]));
    let (on, off) = (tmp.path().join("on"), tmp.path().join("off"));
    assert_eq!(code(&run(&scene, &on, &[])), 0);
    assert_eq!(code(&run(&scene, &off, &["--no-dvir", "--no-pr"])), 0);
    let (c_on, c_off) = (mean_chamfer(&on), mean_chamfer(&off));
    let change = (c_on - c_off).abs() / c_off;
    assert!(
        change < 0.05,
        "on {c_on} off {c_off}: relative change {change:.4}"
    );
}
