use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hjens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjens")).args(args).output().unwrap()
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run_default(cmd: &str, out: &Path) -> Output {
    let cfg = config(&format!("{cmd}.ini"));
    hjens(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = hjens(&["eulerian"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(hjens(&["simulate"]).status.code(), Some(2));
}

#[test]
fn shipped_configs_run() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["lagrangian", "eulerian", "hj", "prep", "layers", "dipole"] {
        let out = dir.path().join(cmd);
        let o = run_default(cmd, &out);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        assert!(std::fs::read_dir(&out).unwrap().count() > 0, "{cmd} wrote nothing");
    }
}

#[test]
fn rest_ensemble_stops_at_the_caustic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("caustic.ini");
    let o = hjens(&["eulerian", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    let t: f64 = msg
        .split("caustic at t = ")
        .nth(1)
        .and_then(|rest| rest.split(':').next())
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| panic!("no caustic time in `{msg}`"));
    assert!((t - std::f64::consts::FRAC_PI_2).abs() < 0.05);
    // snapshots up to the caustic are still written
    assert!(dir.path().join("eulerian_0000.hjfield").exists());
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("eulerian.ini")).unwrap().replace("omega = 1", "omega = 1\nspeed = 3");
    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, text).unwrap();
    let o = hjens(&["eulerian", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 6"), "{}", stderr(&o));
}

#[test]
fn nonexistent_config_file_exits_2() {
    let o = hjens(&["hj", "--config", "/nonexistent/run.ini"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut listings = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for cmd in ["lagrangian", "eulerian", "dipole"] {
            assert_eq!(run_default(cmd, &out.join(cmd)).status.code(), Some(0));
        }
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for cmd in ["lagrangian", "eulerian", "dipole"] {
            for e in std::fs::read_dir(out.join(cmd)).unwrap() {
                let p = e.unwrap().path();
                files.push((format!("{cmd}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap()));
            }
        }
        files.sort();
        listings.push(files);
    }
    assert_eq!(listings[0], listings[1]);
}

#[test]
fn verify_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = hjens(&["verify", "--out", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 11);
}
