use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn petdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petdiff")).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn tiny() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json").to_string_lossy().into_owned()
}

#[test]
fn help_lists_subcommands() {
    let out = petdiff(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["phantom", "train", "denoise", "segment", "quantify", "evaluate", "ablate"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = petdiff(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"phantom": {"dims": [0, 16, 16]}}"#).unwrap();
    let out = petdiff(&["phantom", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = petdiff(&[
        "evaluate",
        "--pred",
        dir.path().join("nope").to_str().unwrap(),
        "--ref",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let out = petdiff(&[
        "segment",
        "--checkpoint",
        dir.path().join("missing.pckpt").to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn phantom_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = petdiff(&["phantom", "--config", &tiny(), "--out", data.to_str().unwrap(), "--n-cases", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());
}
