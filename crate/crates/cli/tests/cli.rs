use std::path::PathBuf;
use std::process::{Command, Output};

fn sso(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sso-sandbox"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .display()
        .to_string()
}

#[test]
fn all_primary_pass() {
    let o = sso(&["run", "--all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("10 of 10 scenarios passed"));
}

#[test]
fn disabling_the_guard_fails_s3() {
    let o = sso(&["run", "--scenario", "S3", "--no-referer-guard"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(
        out.contains("\"referer_guard\":false"),
        "overrides not echoed: {out}"
    );
    assert!(out.contains("failed: S3"));
}

#[test]
fn unknown_scenario_prints_catalog() {
    let o = sso(&["run", "--scenario", "S42"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("S42") && err.contains("S10") && err.contains("S8-flag-only"));
}

#[test]
fn bad_flags_exit_2() {
    assert_eq!(sso(&["run", "--bogus"]).status.code(), Some(2));
    assert_eq!(
        sso(&["run", "--all", "--absent-mode", "sometimes"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        sso(&["run", "--all", "--referer-guard", "--no-referer-guard"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sso(&["run"]).status.code(), Some(2));
    assert_eq!(
        sso(&["run", "--all", "--world", "/nonexistent.toml"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn json_report_shape() {
    let o = sso(&[
        "run",
        "--scenario",
        "S8",
        "--absent-mode",
        "flag-only",
        "--format",
        "json",
        "--seed",
        "5",
    ]);
    // S8 expects fail_closed, so forcing flag_only fails its expectation.
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["overrides"]["absent_referer_mode"], "flag_only");
    let r = &v["reports"][0];
    assert_eq!(r["id"], "S8");
    assert_eq!(r["verdicts"][0]["flagged"], true);
    assert_eq!(r["verdicts"][0]["outcome"], "completed");
}

#[test]
fn same_seed_same_output() {
    let a = sso(&[
        "run",
        "--all",
        "--format",
        "json",
        "--seed",
        "9",
        "--parallel",
    ]);
    let b = sso(&["run", "--all", "--format", "json", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn custom_world_from_toml() {
    let world = data("world.toml");
    let o = sso(&["run", "--scenario", "S3", "--world", &world]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("Referer: https://evil.example/"));
    let list = sso(&["list", "--world", &world]);
    assert_eq!(list.status.code(), Some(0));
}

#[test]
fn out_dir_gets_one_file_per_scenario() {
    let dir = std::env::temp_dir().join(format!("sso-sandbox-out-{}", std::process::id()));
    let o = sso(&[
        "run",
        "--scenario",
        "S1",
        "--scenario",
        "S3'",
        "--format",
        "json",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    for f in [
        "S1.json",
        "S1.listing.txt",
        "S3_prime.json",
        "S3_prime.listing.txt",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn default_world_round_trips() {
    let o = sso(&["world"]);
    assert_eq!(o.status.code(), Some(0));
    let path = std::env::temp_dir().join(format!("sso-sandbox-world-{}.toml", std::process::id()));
    std::fs::write(&path, &o.stdout).unwrap();
    let run = sso(&["run", "--all", "--world", path.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(0));
    let _ = std::fs::remove_file(path);
}
