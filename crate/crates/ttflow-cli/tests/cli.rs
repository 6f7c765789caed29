use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ttflow"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ttflow-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY: &str = r#"{"problem":"ac3d","n":8,"method":"tt_cross","stepper":{"t_end":0.0},"timing":false,
"reference":{"kind":"compute","every":0.01}}"#;

#[test]
fn run_writes_artifacts() {
    let dir = scratch("run");
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.join("out");
    let status = bin().arg("run").arg(&cfg).arg("--output").arg(&out).status().unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("meta.json").exists());
    assert!(out.join("config.json").exists());

    let cmp = bin().arg("compare").arg(out.join("results.csv")).output().unwrap();
    assert!(cmp.status.success());
    let text = String::from_utf8(cmp.stdout).unwrap();
    assert!(text.starts_with("run"));
    assert!(text.contains("run,avg_rank_l1,final_err,runtime_s"));
}

#[test]
fn invalid_config_exits_nonzero_with_message() {
    let dir = scratch("bad");
    let cfg = dir.join("bad.json");
    fs::write(&cfg, r#"{"problem":"ac3d","n":7,"method":"tt_cross"}"#).unwrap();
    let out = bin().arg("run").arg(&cfg).arg("--output").arg(dir.join("out")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("n must be even"));
}

#[test]
fn paper_size_presets_need_the_flag() {
    let dir = scratch("gate");
    let out = bin().args(["reference", "ac3d", "--output"]).arg(&dir).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("--full-scale"));
}

#[test]
fn reference_command_stores_snapshots() {
    let dir = scratch("reference");
    let out = bin().args(["--threads", "2", "reference", "ac3d_ci", "--output"]).arg(&dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(dir.join("ac3d_ci.ttrf")).unwrap();
    let snaps = ttflow::runner::load_reference(&mut bytes.as_slice()).unwrap();
    assert_eq!(snaps.len(), 11);
}
