use std::path::Path;
use std::process::{Command, Output};

fn warpflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpflow"))
        .args(args)
        .output()
        .unwrap()
}

fn small_config(dir: &Path, u: &str) -> String {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "name": "small",
  "grid": {{"n_points": 64}},
  "p": 1,
  "phi": {{"kind": "constant", "value": 1.0}},
  "u": {u},
  "system": "gauged",
  "t_final": 0.25,
  "reduced_slices": 16,
  "functional_rows": 3,
  "seed": 3
}}
"#
    );
    let path = dir.join("small.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(
        tmp.path(),
        r#"{"kind": "sine", "a": 0.3, "k": 1, "b": 0.0}"#,
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = warpflow(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(
            o.status.code() == Some(0) || o.status.code() == Some(1),
            "{o:?}"
        );
    }
    let (la, lb) = (listing(&a), listing(&b));
    let names: Vec<&str> = la.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "manifest.json",
        "snapshots.csv",
        "verdict.json",
        "functionals.csv",
    ] {
        assert!(names.contains(&expected), "{names:?}");
    }
    assert_eq!(la, lb);
}

#[test]
fn report_reads_stored_verdicts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"{"kind": "constant", "value": 0.0}"#);
    let out = tmp.path().join("run");
    let run = warpflow(&["flow", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0), "{run:?}");
    let rep = warpflow(&["report", "--out", out.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&rep.stdout).contains("PASS  max_principle_monitors"));
    let empty = warpflow(&[
        "report",
        "--out",
        tmp.path().join("nothing").to_str().unwrap(),
    ]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn unknown_expression_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"{"kind": "exp", "a": 1.0}"#);
    let o = warpflow(&[
        "run",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("r").join("manifest.json").exists());
}

#[test]
fn single_level_study_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"{"kind": "constant", "value": 0.0}"#);
    let o = warpflow(&[
        "study",
        "--config",
        &cfg,
        "--level",
        "1",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 2 levels"));
}

#[test]
fn unknown_preset_is_rejected() {
    let o = warpflow(&["flow", "--config", "preset:sphere"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn coarse_grid_bootstrap_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#"{"kind": "constant", "value": 0.0}"#)
        .replace("small.json", "coarse.json");
    let text = std::fs::read_to_string(tmp.path().join("small.json")).unwrap();
    std::fs::write(&cfg, text.replace("\"n_points\": 64", "\"n_points\": 32")).unwrap();
    let o = warpflow(&[
        "conjugate",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("r").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bootstrap tau"));
}
