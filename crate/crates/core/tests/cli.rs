use std::path::PathBuf;
use std::process::Command;

fn program(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("programs").join(name)
}

fn rtensor(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rtensor")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn run_and_oracle_agree_in_json() {
    let f = program("prefix_sum.rtl");
    let f = f.to_str().unwrap();
    let (code, run, err) = rtensor(&["run", f, "--bind", "T=5", "--format", "json"]);
    assert_eq!(code, 0, "{err}");
    let (_, oracle, _) = rtensor(&["oracle", f, "--bind", "T=5", "--format", "json"]);
    let a: serde_json::Value = serde_json::from_str(&run).unwrap();
    let b: serde_json::Value = serde_json::from_str(&oracle).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stats_report_memory_counters() {
    let (code, out, err) = rtensor(&["stats", program("window.rtl").to_str().unwrap(), "--swap-threshold", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().any(|l| l.starts_with("executes=")), "{out}");
    assert!(out.lines().any(|l| l.starts_with("device_capacity=")), "{out}");
}

#[test]
fn dump_writes_to_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.dot");
    let (code, _, err) = rtensor(&["dump", program("reinforce.rtl").to_str().unwrap(), "--what", "dot", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(std::fs::read_to_string(path).unwrap().starts_with("digraph"));
}

#[test]
fn device_overflow_is_reported() {
    let f = program("large_obs.rtl");
    let (code, _, err) = rtensor(&["run", f.to_str().unwrap(), "--no-incrementalize", "--no-swap", "--device-bytes", "98304"]);
    assert_ne!(code, 0);
    assert!(err.contains("error"), "{err}");
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.rtl");
    std::fs::write(&path, "x = nope(;\n").unwrap();
    let (code, _, err) = rtensor(&["compile", path.to_str().unwrap()]);
    assert_eq!(code, 1, "{err}");
    let (code, _, _) = rtensor(&["run", "/nonexistent.rtl"]);
    assert_eq!(code, 1);
}
