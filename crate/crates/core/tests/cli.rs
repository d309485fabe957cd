use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use mocobot::scenario::{presets, RunSummary, WrenchProfile};
use nalgebra::Vector3;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mocobot"));
    c.env_remove("MOCOBOT_PORT").env("RUST_LOG", "error");
    c
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn exec(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn summary(dir: &Path) -> RunSummary {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_logs_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pvc");
    let cfg = repo("scenarios/pvc_float.toml");
    let o = exec(&["run", cfg.to_str().unwrap(), "--duration", "0.5", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert!(s.completed);
    assert_eq!(s.seed, 7);
    assert_eq!(s.ticks, 2000);
    for f in ["payload.csv", "robots.csv", "humans.csv", "events.jsonl", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(stdout(&o).contains("pvc_float: completed"));
}

#[test]
fn several_scenarios_run_side_by_side() {
    let dir = tempfile::tempdir().unwrap();
    let o = exec(&["run", "walk_the_dog", "pvc_float", "--duration", "0.25", "--json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let all: Vec<RunSummary> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(all.len(), 2);
    assert!(summary(&dir.path().join("walk_the_dog")).completed);
    assert!(summary(&dir.path().join("pvc_float")).completed);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nduration = -1.0\n").unwrap();
    for args in [
        vec!["run", bad.to_str().unwrap()],
        vec!["run", "missing.toml"],
        vec!["rank", "missing.toml"],
        vec!["sea-step", "missing.toml"],
        vec!["calibrate", bad.to_str().unwrap()],
        vec!["run", "walk_the_dog", "--duration", "-2"],
        vec!["frobnicate"],
    ] {
        let o = exec(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn simulation_fault_exits_with_3_and_keeps_the_log() {
    let mut cfg = presets::walk_the_dog();
    cfg.humans[0].profile = WrenchProfile::Constant {
        force: Vector3::new(400.0, 0.0, 0.0),
        moment: Vector3::zeros(),
    };
    cfg.humans[0].impedance = None;
    cfg.robots[0].recenter = false;
    cfg.duration = 5.0;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shove.toml");
    cfg.save(&path).unwrap();
    let out = dir.path().join("log");
    let o = exec(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(summary(&out).fault.is_some());
    assert!(std::fs::read_to_string(out.join("robots.csv")).unwrap().lines().count() > 1);
}

#[test]
fn replaying_a_command_log_applies_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = presets::pvc_float();
    cfg.humans[0].profile = WrenchProfile::Interactive;
    cfg.duration = 1.0;
    let path = dir.path().join("live.toml");
    cfg.save(&path).unwrap();
    let log = dir.path().join("commands.jsonl");
    std::fs::write(
        &log,
        "{\"tick\":400,\"command\":{\"kind\":\"apply_wrench\",\"grip\":\"guide\",\"force\":[6.0,0.0,0.0],\"moment\":[0.0,0.0,0.0]}}\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = exec(&["run", path.to_str().unwrap(), "--replay", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert!((s.peak_human_force - 6.0).abs() < 1e-12, "{}", s.peak_human_force);
}

#[test]
fn subcommands_report() {
    let sea = repo("params/sea.toml");
    let o = exec(&["sea-step", sea.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["settling_time"].as_f64().unwrap() < 0.1);

    let o = exec(&["sea-freq", sea.to_str().unwrap(), "--freqs", "1,10", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 2);

    let o = exec(&["calibrate", repo("params/delta.toml").to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["home"]["stiffness_diag"][2].as_f64().unwrap() - 2000.0).abs() < 1e-6);

    let o = exec(&["rank", "pvc_float", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let ranks: Vec<_> = v["rows"].as_array().unwrap().iter().map(|r| r["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, [3, 5, 6, 5, 7, 6]);
}

#[test]
fn serve_takes_its_port_from_the_environment() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["run", "walk_the_dog", "--serve", "--duration", "1.5", "--out", dir.path().to_str().unwrap()])
        .env("MOCOBOT_PORT", port.to_string())
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.contains(&format!("127.0.0.1:{port}")), "{line}");
    let (mut ws, _) = tungstenite::connect(format!("ws://127.0.0.1:{port}")).unwrap();
    let first = ws.read().unwrap();
    assert!(first.to_text().unwrap().contains("\"hello\""));
    let t0 = std::time::Instant::now();
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(t0.elapsed() > Duration::from_millis(800));
    assert!(summary(dir.path()).completed);
    assert!(dir.path().join("commands.jsonl").exists());
}
