//! End-to-end runs of the `ringscope` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn desk() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

fn ringscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ringscope"))
        .args(args)
        .env_remove("RINGSCOPE_OUT")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn best_effort_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(desk())
        .unwrap()
        .replace("mode = \"completeness\"", "mode = \"best_effort\"\nstrategy = \"drop_recent\"")
        .replace("ratio = 0.5", "ratio = 4.0");
    let path = dir.join("best_effort.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn sweep_writes_one_summary_row_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = ringscope(&[
        "--config", s(&desk()), "--out", s(&out),
        "--mode", "sync,callback,ring2", "--sweep", "0.5,2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "config.toml", "metrics.csv", "summary.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let mut rdr = csv::Reader::from_path(out.join("metrics.csv")).unwrap();
    let summaries = rdr
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[0] == "summary")
        .count();
    assert_eq!(summaries, 6);
    let points: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 6);
    assert!(out.join("runs/ring2-r2/tp0-pp0").is_dir());
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_ringscope"))
        .args(["--config", s(&desk()), "--mode", "ring2", "--sweep", "1"])
        .env("RINGSCOPE_OUT", &out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("metrics.csv").is_file());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = ringscope(&["--config", s(&desk()), "--out", s(&out), "--seed", "99", "--sweep", "1"]);
        assert!(o.status.success());
        csvs.push(fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn verify_accepts_a_clean_dataset_and_rejects_a_tampered_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = ringscope(&["--config", s(&desk()), "--out", s(&out), "--mode", "ring2", "--sweep", "2"]);
    assert!(o.status.success());
    let run = out.join("runs/ring2-r2");

    let o = ringscope(&["--config", s(&desk()), "--verify", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));

    let (_, payload) = ringscope::exporter::sink::dataset_files(run.join("tp0-pp0"));
    let mut bytes = fs::read(&payload).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&payload, bytes).unwrap();
    let o = ringscope(&["--config", s(&desk()), "--verify", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("1 diff(s)"), "{stdout}");
}

#[test]
fn verify_excludes_best_effort_drops() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = best_effort_config(tmp.path());
    let out = tmp.path().join("out");
    let o = ringscope(&["--config", s(&cfg), "--out", s(&out), "--mode", "ring2", "--sweep", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("runs/ring2-r4");
    let drops: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("drops.json")).unwrap()).unwrap();
    assert!(!drops.as_array().unwrap().is_empty(), "the overload produced no drops");

    let o = ringscope(&["--config", s(&cfg), "--verify", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn overload_grid_writes_its_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = ringscope(&["--config", s(&desk()), "--out", s(&out), "--overload", "--sweep", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv::Reader::from_path(out.join("overload.csv")).unwrap().records().count();
    // 3 hook counts x 5 capacities x 2 policies
    assert_eq!(rows, 30);
}

#[test]
fn wall_clock_smoke_run_succeeds() {
    let o = ringscope(&["--config", s(&desk()), "--wall-clock", "--sweep", "0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("wall-clock ring2"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(ringscope(&["--config", s(&missing)]).status.code(), Some(2));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(desk()).unwrap().replace("meta_slots = 256", "meta_slots = 0")).unwrap();
    let out = tmp.path().join("out");
    assert_eq!(ringscope(&["--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));

    assert_eq!(ringscope(&["--config", s(&desk()), "--sweep", "-1"]).status.code(), Some(2));
    assert_eq!(ringscope(&["--config", s(&desk()), "--mode", "warp"]).status.code(), Some(2));
    assert_eq!(ringscope(&[]).status.code(), Some(2));
}
