use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wulff-lab"));
    c.env_remove("WULFF_LAB_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn enumerate_matches_hand_computed_four_cycle_law() {
    let o = run(&["enumerate", "--shape", "box", "--N", "2", "--beta", "0.4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let p = v["probabilities"].as_object().unwrap();
    assert_eq!(p.len(), 16);
    let total: f64 = p.values().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    // 2×2 free box is a 4-cycle: all-equal has energy −4, so weight e^{4β}
    let z: f64 = (0..16u32)
        .map(|m| {
            let s: Vec<f64> = (0..4).map(|i| if m >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
            (0.4 * (s[0] * s[1] + s[1] * s[3] + s[3] * s[2] + s[2] * s[0])).exp()
        })
        .sum();
    let want = (0.4f64 * 4.0).exp() / z;
    assert!((p["15"].as_f64().unwrap() - want).abs() < 1e-12);
    assert!((p["0"].as_f64().unwrap() - want).abs() < 1e-12);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["sample", "--model", "nope", "--out", "x"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["run"])), 1);
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("k");
    let o = run(&["sample", "--model", "kawasaki", "--shape", "torus", "--bc", "periodic", "--N", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--constraint"));
}

#[test]
fn unknown_config_key_is_reported_with_the_allowed_keys() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.txt");
    std::fs::write(&cfg, "preset = wulff-gallery\ntau = isotropic\nradius = 3\n").unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("radius") && e.contains("tau_file"), "{e}");
}

#[test]
fn duality_selftest_passes_and_report_is_idempotent() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("dual");
    let o = run(&["run", "--preset", "duality-selftest", "--set", "max_side=2", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failed"));
    let first = std::fs::read(out.join("report.txt")).unwrap();
    assert_eq!(code(&run(&["report", out.to_str().unwrap()])), 0);
    assert_eq!(first, std::fs::read(out.join("report.txt")).unwrap());
}

#[test]
fn output_root_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = bin().env("WULFF_LAB_OUT", d.path()).args(["run", "--preset", "wulff-gallery"]).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dirs: Vec<_> = std::fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].starts_with("wulff-gallery-"));
}

#[test]
fn failing_checks_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let m = serde_json::json!({
        "preset": "wulff-gallery", "config_hash": "x", "seed": 1, "tool_version": "0",
        "started": 0, "finished": 1,
        "stages": [{"name": "shape", "seed": 0, "files": [], "checks": [{"name": "c", "pass": false, "detail": ""}]}]
    });
    std::fs::write(d.path().join("manifest.json"), m.to_string()).unwrap();
    let o = run(&["report", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn wulff_and_shape_compare_square_against_disk() {
    let d = tempfile::tempdir().unwrap();
    let (sq, disk) = (d.path().join("sq"), d.path().join("disk"));
    assert_eq!(code(&run(&["wulff", "--tau", "l1", "--out", sq.to_str().unwrap()])), 0);
    assert_eq!(code(&run(&["wulff", "--out", disk.to_str().unwrap()])), 0);
    let e = json_file(&disk.join("energy.json"));
    assert!((e["energy"].as_f64().unwrap() - 2.0 * std::f64::consts::PI.sqrt()).abs() < 1e-3);
    let o = run(&["shape-compare", sq.join("shape.csv").to_str().unwrap(), disk.join("shape.csv").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    // corner of the unit square against the circumscribed gap of the unit-area disk
    let want = 0.5f64.sqrt() - 1.0 / std::f64::consts::PI.sqrt();
    assert!((v["hausdorff"].as_f64().unwrap() - want).abs() < 1e-4, "{v}");
}

#[test]
fn tension_file_feeds_wulff() {
    let d = tempfile::tempdir().unwrap();
    let t = d.path().join("t.json");
    assert_eq!(code(&run(&["tension", "--beta", "0.7", "--method", "isotropic", "--directions", "16", "--out", t.to_str().unwrap()])), 0);
    let v = json_file(&t);
    assert_eq!(v["directions"].as_array().unwrap().len(), 16);
    assert_eq!(v["convexified"], Value::Bool(true));
    let w = d.path().join("w");
    let o = run(&["wulff", "--tension-file", t.to_str().unwrap(), "--out", w.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(w.join("shape.csv").exists());
}

#[test]
fn sampled_snapshots_feed_both_analyses() {
    let d = tempfile::tempdir().unwrap();
    let s = d.path().join("snap");
    let o = run(&[
        "sample", "--model", "fk", "--shape", "torus", "--bc", "periodic", "--N", "16", "--beta", "0.8", "--burn-in", "20", "--sweeps", "30",
        "--thin", "10", "--seed", "4", "--out", s.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = json_file(&s.join("manifest.json"));
    assert_eq!(m["files"].as_array().unwrap().len(), 6);
    let o = run(&["analyze", "labels", s.to_str().unwrap(), "--scheme", "fk", "--k", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = json_file(&s.join("analysis/tightness.json"));
    assert_eq!(t["report"]["scales"].as_array().unwrap().len(), 1);
    let csv = std::fs::read_to_string(s.join("analysis/labels.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let o = run(&["analyze", "contours", s.to_str().unwrap(), "--cutoff", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(s.join("analysis/contours.csv").exists());

    // same seed, same bytes
    let s2 = d.path().join("snap2");
    run(&[
        "sample", "--model", "fk", "--shape", "torus", "--bc", "periodic", "--N", "16", "--beta", "0.8", "--burn-in", "20", "--sweeps", "30",
        "--thin", "10", "--seed", "4", "--out", s2.to_str().unwrap(),
    ]);
    assert_eq!(json_file(&s2.join("manifest.json"))["files"], m["files"]);
}
