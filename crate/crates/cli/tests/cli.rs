use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stereo-patch"));
    c.env_remove("STEREOPATCH_OUT");
    c
}

const CALIB: &str = "calib_time: 09-Jan-2012 13:57:47\n\
P_rect_02: 7.215377e+02 0 6.095593e+02 4.485728e+01 0 7.215377e+02 1.728540e+02 2.163791e-01 0 0 1 2.745884e-03\n\
P_rect_03: 7.215377e+02 0 6.095593e+02 -3.395242e+02 0 7.215377e+02 1.728540e+02 2.199936e+00 0 0 1 2.729905e-03\n\
R_rect_00: 1 0 0 0 1 0 0 0 1\n";

#[test]
fn parse_calib_prints_focal_and_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("000000.txt");
    std::fs::write(&path, CALIB).unwrap();
    let out = bin().arg("parse-calib").arg(&path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("focal_px:   721.5377"), "{text}");
    let b: f64 = text.lines().find(|l| l.starts_with("baseline_m")).unwrap().split_whitespace().last().unwrap().parse().unwrap();
    assert!((b - (44.85728 + 339.5242) / 721.5377).abs() < 1e-9);
}

#[test]
fn malformed_calibration_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, CALIB.replace("R_rect_00: 1 0 0 0 1 0 0 0 1", "R_rect_00: 1 0 0")).unwrap();
    let out = bin().arg("parse-calib").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.txt:4: R_rect_00"));
}

#[test]
fn missing_dataset_dir_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["attack", "--set", "scene_source.kind=kitti", "--set", "scene_source.dir=/no/such/kitti"])
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_override_value_is_rejected() {
    let out = bin().args(["attack", "--set", "attack.mode=sideways"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn artifacts(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn attack_writes_the_output_contract_and_eval_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = bin()
        .args(["attack", "--steps", "2", "--set", "scene_count=1", "--set", "eval_scene_count=1"])
        .env("STEREOPATCH_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    let files = artifacts(&out);
    for f in ["patch.png", "patch.json", "trace.csv", "report.json", "report.csv"] {
        assert!(files.iter().any(|x| x == f), "{f} missing from {files:?}");
    }
    assert!(files.iter().filter(|f| f.starts_with("panel_")).count() >= 2);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,total,rmse,entropy,tv"));

    let eval_out = dir.path().join("eval");
    let status = bin()
        .args(["eval", "--set", "scene_count=1", "--set", "eval_scene_count=1", "--patch"])
        .arg(&out)
        .arg("--out")
        .arg(&eval_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), std::fs::read_to_string(eval_out.join("report.csv")).unwrap());
}
