use std::path::Path;
use std::process::{Command, Output};

fn nvf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nvf")).current_dir(dir).args(args).output().expect("nvf runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn sensitivity_from_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvf(dir.path(), &["sensitivity", "--contrast", "0.053", "--fwhm-mhz", "7.2", "--rate", "45000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("17.6 µT/√Hz"), "{text}");
    assert!(text.contains("note:"), "{text}");
}

#[test]
fn zero_hold_duration_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvf(dir.path(), &["hold", "--duration", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("recipes.hold_duration_s"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"world": {"coil": {"turn": 10}}}"#).unwrap();
    let o = nvf(dir.path(), &["height-curve", "--config", "cfg.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("world.coil.turn"), "{}", stderr(&o));
}

#[test]
fn map_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = nvf(dir.path(), &["map", "--seed", "7", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["map_samples.csv", "map_trajectory.csv", "map_fit.txt", "map_reference_fit.txt"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs");
    }
}

#[test]
fn default_directory_and_overwrite_protection() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["hold", "--duration", "5", "--seed", "3"];
    let first = nvf(dir.path(), &args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let csv = dir.path().join("out/hold-3/hold_positions.csv");
    let before = std::fs::read(&csv).unwrap();

    let second = nvf(dir.path(), &args);
    assert_eq!(second.status.code(), Some(2));
    assert!(stderr(&second).contains("--force"));

    let forced = nvf(dir.path(), &[&args[..], &["--force"]].concat());
    assert_eq!(forced.status.code(), Some(0));
    assert_eq!(std::fs::read(&csv).unwrap(), before);
}

#[test]
fn every_listed_file_exists() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvf(dir.path(), &["esr", "--offset-um", "2,0", "--dwell-s", "0.5", "--out", "esr"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("splitting:"));
    let listed: Vec<&str> = text.lines().skip_while(|l| *l != "files:").skip(1).map(str::trim).collect();
    assert_eq!(listed.len(), 3);
    for f in listed {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn malformed_offset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = nvf(dir.path(), &["esr", "--offset-um", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}
