use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{SystemTime, UNIX_EPOCH};

use conscientia::cli::{replay_traces, simulate, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME};
use conscientia::scenario::parse_scenario;
use conscientia::trace::parse_trace;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conscientia"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> u8 {
    o.status.code().expect("exited normally") as u8
}

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

/// Copies a corpus scenario into a scratch directory so default outputs
/// land there.
fn scratch(name: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(format!("{name}.toml"));
    fs::copy(corpus(name), &p).unwrap();
    (dir, p)
}

#[test]
fn validate_accepts_the_corpus() {
    for name in [
        "baseline",
        "worker-kill",
        "rv-kill",
        "capacity-split",
        "partition-merge-split",
        "saturation-decay",
    ] {
        let o = bin(&["validate", corpus(name).to_str().unwrap()]);
        assert_eq!(
            code(&o),
            EXIT_OK,
            "{name}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

#[test]
fn run_writes_default_outputs() {
    let (dir, p) = scratch("baseline");
    let o = bin(&["run", p.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("queries_serviced"));
    let trace = fs::read_to_string(dir.path().join("baseline.trace.jsonl")).unwrap();
    let metrics = fs::read_to_string(dir.path().join("baseline.metrics.csv")).unwrap();
    assert!(!parse_trace(&trace).unwrap().is_empty());
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("format=1"));
    assert!(lines.next().unwrap().starts_with("queries_submitted,"));
    assert!(lines.next().unwrap().starts_with("60,60,"));
}

#[test]
fn run_honours_flags() {
    let (dir, p) = scratch("worker-kill");
    let t = dir.path().join("out.jsonl");
    let m = dir.path().join("out.csv");
    let o = bin(&[
        "run",
        p.to_str().unwrap(),
        "--seed",
        "99",
        "--until",
        "5000",
        "--trace",
        t.to_str().unwrap(),
        "--metrics",
        m.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(code(&o), EXIT_OK);
    assert!(o.stdout.is_empty());
    let recs = parse_trace(&fs::read_to_string(&t).unwrap()).unwrap();
    assert!(recs.iter().all(|r| r.t <= 5000));
    assert!(m.exists());
}

#[test]
fn replay_check_reports_identical_runs() {
    let o = bin(&[
        "replay-check",
        corpus("rv-kill").to_str().unwrap(),
        "--runs",
        "3",
    ]);
    assert_eq!(code(&o), EXIT_OK);
    assert!(String::from_utf8_lossy(&o.stdout).contains("identical"));
}

#[test]
fn replay_check_needs_two_runs() {
    let o = bin(&[
        "replay-check",
        corpus("baseline").to_str().unwrap(),
        "--runs",
        "1",
    ]);
    assert_eq!(code(&o), EXIT_INVALID);
}

#[test]
fn invalid_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(corpus("baseline"))
        .unwrap()
        .replace("duration_ms = 30000", "duration_ms = 0");
    let p = dir.path().join("bad.toml");
    fs::write(&p, text).unwrap();
    for cmd in ["validate", "run", "replay-check"] {
        let o = bin(&[cmd, p.to_str().unwrap()]);
        assert_eq!(code(&o), EXIT_INVALID, "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("duration_ms"));
    }
}

#[test]
fn syntax_error_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("broken.toml");
    fs::write(&p, "name = \"x\"\nseed = \n").unwrap();
    let o = bin(&["validate", p.to_str().unwrap()]);
    assert_eq!(code(&o), EXIT_INVALID);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn missing_file_exits_1() {
    let o = bin(&["validate", "/nonexistent/nowhere.toml"]);
    assert_eq!(code(&o), EXIT_RUNTIME);
}

#[test]
fn unwritable_output_exits_1() {
    let (_dir, p) = scratch("baseline");
    let o = bin(&[
        "run",
        p.to_str().unwrap(),
        "--trace",
        "/nonexistent/dir/t.jsonl",
        "--quiet",
    ]);
    assert_eq!(code(&o), EXIT_RUNTIME);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = bin(&["frobnicate"]);
    assert_eq!(code(&o), EXIT_INVALID);
}

/// Negative control: a trace that carries wall-clock time must be caught.
#[test]
fn replay_detects_wall_clock_leak() {
    let s = parse_scenario(&fs::read_to_string(corpus("baseline")).unwrap()).unwrap();
    let d = replay_traces(3, |run| {
        let sim = simulate(&s, None, Some(4000)).unwrap();
        let nanos = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap()
            .as_nanos();
        let mut text = sim.trace().to_text();
        text.push_str(&format!("{{\"wall\":{nanos},\"run\":{run}}}\n"));
        Ok(text)
    })
    .unwrap()
    .expect("wall-clock leak went unnoticed");
    assert_eq!(d.run, 1);
    assert!(d.expected.contains("wall") && d.found.contains("wall"));
}
