use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dmcis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmcis"))
        .args(args)
        .env_remove("DMCIS_OUT_DIR")
        .output()
        .unwrap()
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name).display().to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// basic.ini with its single SDCC asking for more sensors than it has.
fn invalid(dir: &Path) -> PathBuf {
    let p = dir.join("bad.ini");
    fs::write(&p, fs::read_to_string(scenario("basic.ini")).unwrap().replace("tau = 5", "tau = 50")).unwrap();
    p
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dmcis(&["validate", &scenario("basic.ini")])), 0);
    assert_eq!(code(&dmcis(&["validate", invalid(dir.path()).to_str().unwrap()])), 1);
    let garbled = dir.path().join("garbled.ini");
    fs::write(&garbled, fs::read_to_string(scenario("basic.ini")).unwrap().replace("speed = 10", "speed = fast")).unwrap();
    let o = dmcis(&["validate", garbled.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("speed"));
    assert_eq!(code(&dmcis(&["validate", dir.path().join("missing.ini").to_str().unwrap()])), 3);
}

#[test]
fn validate_json_is_machine_readable() {
    let o = dmcis(&["validate", "--json", &scenario("quake.ini")]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.is_object());
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = dmcis(&["run", &scenario("quake.ini"), "--seed", "3", "--horizon", "1500", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["trace.jsonl", "metrics.csv", "summary.txt", "trace.sha256"] {
            assert!(out.join(f).is_file(), "{f}");
        }
    }
    let sha = fs::read_to_string(a.join("trace.sha256")).unwrap();
    assert_eq!(sha, fs::read_to_string(b.join("trace.sha256")).unwrap());
    assert_eq!(fs::read(a.join("trace.jsonl")).unwrap(), fs::read(b.join("trace.jsonl")).unwrap());
    let trace = fs::read_to_string(a.join("trace.jsonl")).unwrap();
    assert_eq!(sha.split_whitespace().next().unwrap(), dmcis::engine::trace::digest(trace.as_bytes()));
    // the metrics file reports the same digest
    let rows = dmcis::engine::metrics::read_metrics_csv(&fs::read_to_string(a.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(sha.starts_with(&rows[0].trace_sha256));
}

#[test]
fn zero_horizon_gives_an_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmcis(&["run", &scenario("basic.ini"), "--horizon", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.path().join("trace.jsonl")).unwrap(), "");
}

#[test]
fn run_refuses_invalid_topologies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = dmcis(&["run", invalid(dir.path()).to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(!out.join("trace.jsonl").exists());
}

#[test]
fn out_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dmcis"))
        .args(["run", &scenario("basic.ini"), "--horizon", "50"])
        .env("DMCIS_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("trace.jsonl").is_file());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, "").unwrap();
    let o = dmcis(&["run", &scenario("basic.ini"), "--horizon", "50", "--out", file.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn sweep_writes_rows_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let o = dmcis(&[
        "sweep", &scenario("basic.ini"), "--param", "link_standard", "--values", "802.11b,802.11a",
        "--reps", "2", "--horizon", "600", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("link_standard=802.11a (2 run(s))"));
    let rows = dmcis::engine::metrics::read_metrics_csv(&fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("param,value,runs,"));
    assert_eq!(agg.lines().count(), 3);
}

#[test]
fn sweep_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let basic = scenario("basic.ini");
    // tau beyond the sensor count makes that point invalid
    let o = dmcis(&["sweep", &basic, "--param", "tau", "--values", "5,50", "--horizon", "100", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau=50"));
    assert_eq!(code(&dmcis(&["sweep", &basic, "--param", "tau", "--values", ",", "--out", out])), 2);
    assert_eq!(code(&dmcis(&["sweep", &basic, "--param", "colour", "--values", "1", "--out", out])), 2);
    assert_eq!(code(&dmcis(&["sweep", &basic, "--param", "tau", "--values", "5", "--reps", "0", "--out", out])), 2);
}

#[test]
fn report_summarises_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = dmcis(&["sweep", &scenario("basic.ini"), "--param", "tau", "--values", "3,5", "--reps", "3", "--horizon", "400", "--out", out]);
    assert_eq!(code(&o), 0);
    let metrics = dir.path().join("metrics.csv");
    let table = dmcis(&["report", metrics.to_str().unwrap()]);
    assert_eq!(code(&table), 0);
    assert!(stdout(&table).contains("tau=3 (3 run(s))"));
    let csv = dmcis(&["report", "--csv", metrics.to_str().unwrap()]);
    assert_eq!(stdout(&csv), fs::read_to_string(dir.path().join("aggregate.csv")).unwrap());

    let junk = dir.path().join("junk.csv");
    fs::write(&junk, "a,b\n1,2\n").unwrap();
    assert_eq!(code(&dmcis(&["report", junk.to_str().unwrap()])), 2);
    assert_eq!(code(&dmcis(&["report", dir.path().join("none.csv").to_str().unwrap()])), 3);
}
