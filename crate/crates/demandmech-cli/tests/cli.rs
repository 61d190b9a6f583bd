//! End-to-end tests driving the compiled binary on the bundled scenario.

use std::path::PathBuf;
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "fixtures", "paper_example.json"]
        .iter()
        .collect()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demandmech"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn solve_prints_the_optimum_and_passes() {
    let out = run(&["solve", fixture().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("-1.000000"));
    assert!(stdout.contains("1.105548"));
    assert!(stdout.contains("PASS"));
}

#[test]
fn solve_csv_is_machine_readable() {
    let out = run(&["solve", fixture().to_str().unwrap(), "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("kind,i,t,value"));
    // 6 demands + w + 7 lambdas + 2 mus + 5 kkt rows
    assert_eq!(stdout.lines().count(), 1 + 6 + 1 + 7 + 2 + 5);
    assert!(stdout.lines().last().unwrap().starts_with("kkt_pass,,,true"));
}

#[test]
fn ne_audits_pass_on_the_fixture() {
    let out = run(&["ne", fixture().to_str().unwrap(), "--samples", "100"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("gross surplus 2.416644"));
    assert!(stdout.contains("-> PASS"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let args = ["ne", "--samples", "50", "--seed", "7"];
    let first = run(&[args[0], fixture().to_str().unwrap(), args[1], args[2], args[3], args[4]]);
    let second = run(&[args[0], fixture().to_str().unwrap(), args[1], args[2], args[3], args[4]]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(first.status.code(), second.status.code());
}

#[test]
fn verify_accepts_the_constructed_profile_and_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let profile = dir.path().join("profile.json");
    let out = run(&[
        "ne",
        fixture().to_str().unwrap(),
        "--samples",
        "10",
        "--profile-out",
        profile.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));

    let out = run(&[
        "verify",
        fixture().to_str().unwrap(),
        "--profile",
        profile.to_str().unwrap(),
        "--samples",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("user,max_improvement,coordinate,proposed,pass"));
    assert!(stdout.trim_end().ends_with("true"));

    // shift one announced demand; the report must name an improving deviation
    let mut parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&profile).unwrap()).unwrap();
    let y = parsed["users"][1]["y"][1].as_f64().unwrap();
    parsed["users"][1]["y"][1] = serde_json::json!(y + 0.1);
    std::fs::write(&profile, serde_json::to_string(&parsed).unwrap()).unwrap();

    let out = run(&[
        "verify",
        fixture().to_str().unwrap(),
        "--profile",
        profile.to_str().unwrap(),
        "--samples",
        "100",
    ]);
    assert_eq!(out.status.code(), Some(1));
    // the cheapest fix is user 1 re-aligning her proxy with the shifted
    // demand, which recovers exactly the squared shift
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("user 1"), "{stderr}");
    assert!(stderr.contains("beta[2]"), "{stderr}");
    assert!(stderr.contains("1.000e-2"), "{stderr}");
}

#[test]
fn dist_ne_passes_on_the_fixture_network() {
    let out = run(&["dist-ne", fixture().to_str().unwrap(), "--samples", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("helpers: 1->2, 2->1, 3->2"));
    assert!(stdout.contains("summary consistency"));
}

#[test]
fn learn_writes_a_full_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let out = run(&[
        "learn",
        fixture().to_str().unwrap(),
        "--alpha",
        "0.1",
        "--iters",
        "100",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("k,q1,q2,q3,q4,q5,q6,q7,s1,s2,y1_1,y1_2,y2_1,y2_2,y3_1,y3_2,dist_to_opt,dual_value")
    );
    // header plus one record per iteration, including the initial state
    assert_eq!(text.lines().count(), 1 + 101);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("100,"));
    let dist: f64 = last.split(',').nth(16).unwrap().parse().unwrap();
    assert!(dist < 1e-3);
}

#[test]
fn missing_scenario_is_an_input_error() {
    let out = run(&["solve", "/no/such/file.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["dist-ne", "/no/such/file.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_scenario_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"users\": []}").unwrap();
    let out = run(&["solve", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("error"), "{stderr}");
}
