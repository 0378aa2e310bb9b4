use std::path::Path;
use std::process::{Command, Output};

fn vcache(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcache"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_dir(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read_to_string(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn list_shows_bundled_scenarios() {
    let o = vcache(&["list"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("manual_flush\tmanual_flush"));
    assert!(out.contains("cap_absorption\tcap"));
}

#[test]
fn validate_accepts_every_bundled_scenario() {
    let o = vcache(&["list"]);
    for line in String::from_utf8(o.stdout).unwrap().lines() {
        let name = line.split('\t').next().unwrap();
        let v = vcache(&["validate", name]);
        assert!(v.status.success(), "{name}: {}", stderr(&v));
    }
}

#[test]
fn missing_geometry_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    std::fs::write(
        &path,
        "[scenario]\nname = \"x\"\nexperiment = \"evsets\"\n[geometry]\nl2_ways = 4\nl2_sets = 64\nllc_ways = 4\nllc_sets = 128\ninclusivity = \"non-inclusive\"\nreplacement = \"lru\"\n",
    )
    .unwrap();
    let o = vcache(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("slices"), "{}", stderr(&o));
}

#[test]
fn unknown_policy_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    std::fs::write(
        &path,
        "[scenario]\nname = \"x\"\nexperiment = \"manual_flush\"\npolicy = \"fifo\"\n",
    )
    .unwrap();
    let o = vcache(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fifo"));
}

#[test]
fn unknown_scenario_exits_2() {
    let o = vcache(&["run", "no_such_scenario"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_geometry_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.kv");
    std::fs::write(&path, "l2_ways = 4\n").unwrap();
    let o = vcache(&["build-evsets", "--geometry", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manual_flush_reports_every_way_count() {
    let o = vcache(&["run", "manual_flush"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics"]["detected"], serde_json::json!([2, 4, 6, 8, 11]));
    assert_eq!(v["metrics"]["detected"], v["metrics"]["flushed"]);
}

#[test]
fn same_seed_gives_identical_bundles() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = vcache(&["run", "cap_recolor", "--seed", "7", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let fa = read_dir(a.path());
    assert!(fa.iter().any(|(n, _)| n == "summary.json"));
    assert_eq!(fa, read_dir(b.path()));
}

#[test]
fn seed_flag_overrides_scenario_seed() {
    let o = vcache(&["run", "manual_flush", "--seed", "99"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["seed"], 99);
}

#[test]
fn build_evsets_with_geometry_file_and_state_dump() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.kv");
    std::fs::write(
        &g,
        "l2_ways = 4\nl2_sets = 64\nllc_ways = 4\nllc_sets = 128\nslices = 2\ninclusivity = non-inclusive\nreplacement = lru\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = vcache(&[
        "build-evsets",
        "--geometry",
        g.to_str().unwrap(),
        "--offset",
        "0x0,0x40",
        "--dump-state",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = read_dir(&out);
    let names: Vec<_> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["cache_state.csv", "evsets.csv", "summary.json"]);
    let summary: serde_json::Value = serde_json::from_str(&files[2].1).unwrap();
    assert_eq!(summary["metrics"]["sets"], summary["metrics"]["expected"]);
    assert!(files[0].1.starts_with("level,slice,set,way,tag,owner"));
}

#[test]
fn vscan_flags_a_polluter() {
    let o = vcache(&["vscan", "--polluter", "4096", "--cycles", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["metrics"]["mean_evicted_percent"].as_f64().unwrap() > 50.0);
    let quiet = vcache(&["vscan", "--cycles", "2"]);
    let q: serde_json::Value = serde_json::from_slice(&quiet.stdout).unwrap();
    assert!(q["metrics"]["mean_evicted_percent"].as_f64().unwrap() < 10.0);
}

#[test]
fn vcol_writes_histogram_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("histogram.csv");
    let o = vcache(&["vcol", "--budget", "400", "--report", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("color,pages"));
    let total: usize = lines.map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 400);
}

#[test]
fn vscan_monitor_flags_reach_the_monitor() {
    let o = vcache(&["vscan", "--interval", "500", "--window", "3", "--f", "2", "--cycles", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics"]["final_window_ms"], 3.0);
    let bad = vcache(&["vscan", "--window", "-1"]);
    assert_eq!(bad.status.code(), Some(2));
}
