use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 5
duration = 0.5

[lidar]
rings = 24
azimuth_step_deg = 0.6

[[agents]]
id = 0
x = 0.0
y = 0.0
velocity = [5.0, 0.0]

[[agents]]
id = 1
x = 20.0
y = 3.5
velocity = [5.0, 0.0]
scan_offset = 0.02

[traffic]
count = 12
x_range = [-30.0, 50.0]
lanes = [-7.0, -3.5, 3.5, 7.0]
speed_range = [-8.0, 8.0]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coopalign"))
}

fn scenario(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn metric_rows(out: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = run(&["run", "--scenario", s(&sc), "--epsilon", "0.0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "cpm_sizes.csv", "connectivity.json", "run_manifest.json", "cpm_agent1_frame0.bin"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let rows = metric_rows(&out);
    // three experiments at two IoU thresholds
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[1] == "epsilon" && r[2] == "0"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn epsilon_sweep_has_six_points_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = run(&["run", "--scenario", s(&sc), "--sweep", "epsilon=0:1:0.2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = metric_rows(&out);
    let full_05: Vec<&str> = rows.iter().filter(|r| r[0] == "full" && r[3] == "0.5").map(|r| r[2].as_str()).collect();
    assert_eq!(full_05, ["0", "0.2", "0.4", "0.6", "0.8", "1"]);
}

#[test]
fn same_command_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["run", "--scenario", s(&sc), "--latency-ms", "0:100:100", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "cpm_sizes.csv", "connectivity.json", "run_manifest.json", "cpm_agent1_frame0.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn config_errors_exit_2_without_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad_field = scenario(dir.path(), &TINY.replace("duration = 0.5", "duration = -1.0"));
    let o = run(&["run", "--scenario", s(&bad_field), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("duration"));
    assert!(!out.join("metrics.csv").exists());

    let unknown = scenario(dir.path(), &TINY.replace("seed = 5", "seed = 5\nsede = 6"));
    let o = run(&["run", "--scenario", s(&unknown), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sede") && err.contains("line"), "{err}");

    let sc = scenario(dir.path(), TINY);
    let o = run(&["run", "--scenario", s(&sc), "--epsilon", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--scenario", s(&sc), "--sweep", "speed=0:1:1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--scenario", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--scenario", s(&sc), "-e", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn sweep_subcommand_requires_a_range() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), TINY);
    let o = run(&["sweep", "--scenario", s(&sc), "--epsilon", "0.5", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_cpm_dumps_fields_and_reports_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), TINY);
    let out = dir.path().join("out");
    assert!(run(&["run", "--scenario", s(&sc), "--out", s(&out)]).status.success());
    let file = out.join("cpm_agent1_frame0.bin");
    let o = run(&["inspect-cpm", s(&file), "--hex"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("agent_id       1"), "{text}");
    assert!(text.contains("feature_width  256"));
    assert!(text.contains("43 50 4d 31 01"), "magic and version in the hex dump");

    let bytes = std::fs::read(&file).unwrap();
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..50]).unwrap();
    let o = run(&["inspect-cpm", s(&cut)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset 44"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn grid_report_prints_both_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), TINY);
    let o = run(&["grid-report", "--scenario", s(&sc)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!v["standard"].as_array().unwrap().is_empty());
    assert!(!v["expanding"].as_array().unwrap().is_empty());
    assert_eq!(v["scenario"], "tiny");
}
