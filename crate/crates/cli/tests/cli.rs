use std::path::Path;
use std::process::{Command, Output};

fn bb84(args: &[&str], config: &str, dir: &Path) -> Output {
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_bb84")).args(args).arg("--config").arg(&path).output().unwrap()
}

#[test]
fn malformed_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bb84(&["rate", "--out", "-"], "[source]\nmodel = \"ideal_bb84\"\nbogus = 1\n", dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn mismatched_command_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = bb84(&["simulate", "--out", "-"], "command = \"verify\"\n", dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tampered_discrimination_bound_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let config =
        "command = \"verify\"\n[bounds]\ns_m_override = 0.5\n[verify]\nonly = [\"tag_exploit\"]\ntag_sessions = 2\n";
    let out = bb84(&["verify", "--out", "-", "--format", "csv"], config, dir.path());
    assert_eq!(out.status.code(), Some(3));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("name,passed,measured,bound,detail\n"));
    assert!(text.contains("tag_exploit,false"));
}

#[test]
fn honest_discrimination_bound_passes_verification() {
    let dir = tempfile::tempdir().unwrap();
    let config = "command = \"verify\"\n[verify]\nonly = [\"tag_exploit\", \"gram\"]\ntag_sessions = 2\n";
    let out = bb84(&["verify", "--out", "-"], config, dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn empty_sweep_grid_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let config =
        "[counts]\nn = 1000\nn_d = 400\nn_c = 100\nn_t = 100\nn_t_e = 0\n[sweep]\nparameter = \"c\"\nvalues = []\n";
    let out = bb84(&["sweep", "--out", "-"], config, dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("row,parameter,value,m"));
}

#[test]
fn seed_flag_changes_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let config = "[protocol]\nn = 2000\nsessions = 2\n";
    let a = bb84(&["simulate", "--out", "-", "--seed", "1"], config, dir.path());
    let b = bb84(&["simulate", "--out", "-", "--seed", "2"], config, dir.path());
    let a2 = bb84(&["simulate", "--out", "-", "--seed", "1"], config, dir.path());
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, a2.stdout);
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn rate_writes_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("rate.csv");
    let config = "[counts]\nn = 400000\nn_d = 100000\nn_c = 50000\nn_t = 10000\nn_t_e = 0\n";
    let out = bb84(&["rate", "--out", target.to_str().unwrap()], config, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&target).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("seed,counts.n,"));
}
