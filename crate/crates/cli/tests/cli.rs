use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shaperefine"));
    c.env("SHAPEREFINE_WORKERS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("config.json");
    let body = format!(
        r#"{{
  "phantom": {{ "dims": [48, 48, 40] }},
  "fusion": {{ "atlas_count": 2, "patch_dims": [3, 3, 1], "search_dims": [3, 3, 1] }},
  "registration": {{
    "pyramid_levels": [{{ "control_spacing": [30, 30, 30], "max_iterations": 3, "step_size": 1.0, "smoothing_sigma": 0 }}]
  }}{extra}
}}"#
    );
    fs::write(&p, body).unwrap();
    p
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

fn phantoms(dir: &Path, name: &str, count: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let cfg = small_config(dir, "");
    let o = run(&[
        "phantom",
        "--config",
        s(&cfg),
        "--seed",
        &seed.to_string(),
        "--count",
        &count.to_string(),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn phantom_requires_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["phantom", "--count", "1", "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn phantom_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = phantoms(dir.path(), "a", 2, 7);
    let b = phantoms(dir.path(), "b", 2, 7);
    let c = phantoms(dir.path(), "c", 2, 8);
    for f in ["phantom-000/volume.mgrid", "phantom-001/labels.mgrid", "phantom-001/landmarks.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        fs::read(a.join("phantom-000/volume.mgrid")).unwrap(),
        fs::read(c.join("phantom-000/volume.mgrid")).unwrap()
    );
    let m = manifest(&a);
    assert_eq!(m["command"], "phantom");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["succeeded"].as_array().unwrap().len(), 2);
    assert!(m["outputs"].as_array().unwrap().iter().any(|v| v == "phantom-000/pose.json"));
}

#[test]
fn missing_atlas_dir_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let subjects = phantoms(dir.path(), "subjects", 1, 1);
    let missing = dir.path().join("no-such-atlases");
    let o = run(&[
        "refine",
        "--seed",
        "1",
        "--subjects",
        s(&subjects),
        "--atlases",
        s(&missing),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#", "atlas_count": 3"#);
    let o = run(&["phantom", "--config", s(&cfg), "--seed", "1", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("atlas_count"));
}

#[test]
fn evaluate_identical_cohorts() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantoms(dir.path(), "ph", 2, 3);
    let out = dir.path().join("eval");
    let o = run(&["evaluate", "--pred", s(&ph), "--reference", s(&ph), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("scores.csv")).unwrap();
    let rows: Vec<_> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        let f: Vec<_> = r.split(',').collect();
        assert_eq!(f[2].parse::<f64>().unwrap(), 1.0, "{r}");
        assert_eq!(f[3].parse::<f64>().unwrap(), 0.0, "{r}");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.get("segmentation").is_some());
    assert!(out.join("clinical.csv").is_file());
}

#[test]
fn evaluate_reports_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantoms(dir.path(), "ph", 2, 3);
    let reference = dir.path().join("ref");
    fs::create_dir_all(reference.join("phantom-000")).unwrap();
    fs::copy(ph.join("phantom-000/labels.mgrid"), reference.join("phantom-000/labels.mgrid")).unwrap();
    let out = dir.path().join("eval");
    let o = run(&["evaluate", "--pred", s(&ph), "--reference", s(&reference), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let m = manifest(&out);
    assert_eq!(m["succeeded"], serde_json::json!(["phantom-000"]));
    assert_eq!(m["failed"][0]["subject"], "phantom-001");
}

#[test]
fn simulate_then_refine() {
    let dir = tempfile::tempdir().unwrap();
    let atlases = phantoms(dir.path(), "atlases", 2, 11);
    let hr = phantoms(dir.path(), "hr", 1, 12);
    let cfg = small_config(dir.path(), "");
    let lr = dir.path().join("lr");
    let o = run(&["simulate", "--config", s(&cfg), "--seed", "5", "--subjects", s(&hr), "--out", s(&lr)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(lr.join("phantom-000/shifts.json").is_file());
    assert!(lr.join("phantom-000/landmarks.json").is_file());

    let refine = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&[
            "refine",
            "--config",
            s(&cfg),
            "--seed",
            "5",
            "--subjects",
            s(&lr),
            "--atlases",
            s(&atlases),
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = refine("ra");
    let b = refine("rb");
    for f in ["phantom-000/labels.mgrid", "phantom-000/refine.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("phantom-000/timings.json").is_file());
    let o = run(&["evaluate", "--pred", s(&a), "--reference", s(&hr), "--out", s(&dir.path().join("ev"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn register_then_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let atlases = phantoms(dir.path(), "atlases", 2, 21);
    let hr = phantoms(dir.path(), "hr", 1, 22);
    let cfg = small_config(dir.path(), "");
    let lr = dir.path().join("lr");
    assert!(run(&["simulate", "--config", s(&cfg), "--seed", "1", "--subjects", s(&hr), "--out", s(&lr)])
        .status
        .success());
    let reg = dir.path().join("reg");
    let o = run(&["register", "--config", s(&cfg), "--subjects", s(&lr), "--atlases", s(&atlases), "--out", s(&reg)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let warped: Vec<_> = fs::read_dir(reg.join("phantom-000/warped")).unwrap().collect();
    assert_eq!(warped.len(), 2);
    assert!(reg.join("phantom-000/warped/phantom-000/transform.ffd").is_file());

    let fused = dir.path().join("fused");
    let o = run(&["fuse", "--config", s(&cfg), "--subjects", s(&reg), "--out", s(&fused)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fused.join("phantom-000/labels.mgrid").is_file());

    let sel = dir.path().join("sel");
    let o = run(&["select-atlases", "--config", s(&cfg), "--subjects", s(&lr), "--atlases", s(&atlases), "--out", s(&sel)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(sel.join("phantom-000/selection.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn train_writes_model_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantoms(dir.path(), "ph", 2, 31);
    let cfg = small_config(dir.path(), r#", "augment_copies": 1, "train": { "epochs": 2, "kernel": 3, "context_slices": 1 }"#);
    let out = dir.path().join("model");
    let o = run(&["train", "--config", s(&cfg), "--seed", "4", "--subjects", s(&ph), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert!(out.join("model.mgrid").is_file());
}
