use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fjc(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fjc")).args(args).current_dir(cwd).output().unwrap();
    assert!(out.status.success(), "fjc {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn experiment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.cfg"),
        "# small run\ngraph = ba:60:3\nseed = 9\nruns = 40\ntheta = 0.4\nlambda_strategy = proportional\n",
    )
    .unwrap();
    fjc(&["experiment", "--config", "exp.cfg", "--out-dir", "a"], dir.path());
    fjc(&["experiment", "--config", "exp.cfg", "--out-dir", "b"], dir.path());
    let a = csv_files(&dir.path().join("a"));
    let b = csv_files(&dir.path().join("b"));
    assert!(a.len() >= 4);
    assert_eq!(a, b);
    let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("graph = ba:60:3"));
    assert!(manifest.contains("lambda_strategy = proportional"));
    assert!(manifest.contains("wall_time_seconds"));
}

#[test]
fn solve_and_vector_commands() {
    let dir = tempfile::tempdir().unwrap();
    fjc(&["gen-graph", "--graph", "ba:40:2", "--seed", "1", "--out", "g.txt"], dir.path());
    let out = fjc(&["solve-fj", "--graph", "g.txt", "--check", "--out-dir", "fj"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    let gap: f64 =
        text.lines().find_map(|l| l.strip_prefix("max |closed form - iteration| = ")).unwrap().parse().unwrap();
    assert!(gap < 1e-8);
    let rows = fs::read_to_string(dir.path().join("fj/final_opinions.csv")).unwrap();
    assert_eq!(rows.lines().count(), 41);

    fjc(&["polarizing-vector", "--graph", "g.txt", "--init-opinions", "b1", "--out", "b1.csv"], dir.path());
    let v = fs::read_to_string(dir.path().join("b1.csv")).unwrap();
    assert!(v.starts_with("# B1"));
    let ones = v.lines().skip(2).filter(|l| l.ends_with(",1")).count();
    assert_eq!(ones, 1);
}

#[test]
fn simulate_estimate_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    fjc(
        &["simulate-fjc", "--graph", "karate", "--seed", "4", "--out-dir", "sim", "--set", "event_log=true"],
        dir.path(),
    );
    for name in ["nodes.csv", "cascades.csv", "events.jsonl"] {
        assert!(dir.path().join("sim").join(name).exists(), "{name}");
    }

    // a hand-written trace on the karate club (ids as in the embedded graph)
    fs::write(dir.path().join("trace.csv"), "timestamp,post_id,node_id\n0,a,0\n5,a,1\n7,a,2\n0,b,33\n3,b,32\n9,b,8\n")
        .unwrap();
    fjc(&["estimate-theta", "--graph", "karate", "--trace", "trace.csv", "--out-dir", "th"], dir.path());
    let summary = fs::read_to_string(dir.path().join("th/theta_summary.csv")).unwrap();
    assert!(summary.starts_with("min,q1,median,q3,max,mean,na"));

    fjc(&["replay-trace", "--graph", "karate", "--trace", "trace.csv", "--runs", "10", "--out-dir", "rp"], dir.path());
    let fid = fs::read_to_string(dir.path().join("rp/fidelity.csv")).unwrap();
    assert!(fid.contains("FJC-vs-Real") && fid.contains("FJ-vs-Real"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fjc"))
        .args(["experiment", "--theta", "1.5", "--out-dir", "x"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta"));

    fs::write(dir.path().join("bad.txt"), "1 2\n3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fjc"))
        .args(["experiment", "--graph", "bad.txt", "--out-dir", "y"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let manifest = fs::read_to_string(dir.path().join("y/manifest.txt")).unwrap();
    assert!(manifest.contains("status = failed"));
}
