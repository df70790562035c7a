use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn maprl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maprl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{"grid_rows": 2, "grid_cols": 3, "n_pois": 8, "n_users": 3, "n_trajectories": 40, "n_categories": 3, "seed": 5}"#;

fn run_config(dir: &Path) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{"synthetic_spec": {TINY}, "entity": "poi", "downstream": "POIC", "pretrain_tasks": ["TokRI"], "seeds": [1, 13],
            "hparams": {{"dim": 8, "hidden": 16, "heads": 2, "batch": 16, "pretrain_steps": 10, "finetune_steps": 10, "eval_every": 5, "optimizer": {{"kind": "adam"}}}}}}"#
    );
    let p = dir.join("run.json");
    fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&maprl(&[])), 2);
    assert_eq!(code(&maprl(&["frobnicate"])), 2);
    assert_eq!(code(&maprl(&["run"])), 2);
    assert_eq!(code(&maprl(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"synthetic_spec": {}, "entity": "poi", "downstream": "POIC", "bogus": 1}"#).unwrap();
    let o = maprl(&["run", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = maprl(&["report", "--input", s(&dir.path().join("nothing")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, TINY).unwrap();
    let out = dir.path().join("city");
    assert_eq!(code(&maprl(&["synth", "--spec", s(&spec), "--out", s(&out)])), 0);
    let mut exts: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path().extension().unwrap().to_string_lossy().into_owned())
        .collect();
    exts.sort();
    assert_eq!(exts, ["geo", "json", "rel", "traj"]);
    let report = dir.path().join("check");
    assert_eq!(code(&maprl(&["validate", "--data", s(&out), "--out", s(&report)])), 0);
    assert_eq!(fs::read_to_string(report.join("validation.txt")).unwrap(), "");

    // a dangling trajectory reference is a validation failure
    let traj = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().unwrap() == "traj").unwrap();
    let text = fs::read_to_string(&traj).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let col = header.iter().position(|h| *h == "entity_id").unwrap();
    let mut cells: Vec<String> = lines[1].split(',').map(str::to_string).collect();
    cells[col] = "ghost".into();
    lines[1] = cells.join(",");
    fs::write(&traj, lines.join("\n") + "\n").unwrap();
    let o = maprl(&["validate", "--data", s(&out), "--out", s(&report)]);
    assert_eq!(code(&o), 1);
    assert!(!fs::read_to_string(report.join("validation.txt")).unwrap().is_empty());
}

#[test]
fn convert_writes_atomic_files() {
    let dir = tempfile::tempdir().unwrap();
    let geo = dir.path().join("pois.geojson");
    fs::write(
        &geo,
        r#"{"type":"FeatureCollection","features":[
        {"type":"Feature","id":"a","geometry":{"type":"Point","coordinates":[116.3,39.9]},"properties":{"category":"cafe"}},
        {"type":"Feature","id":"b","geometry":{"type":"Point","coordinates":[116.31,39.91]},"properties":{"category":"bar"}}]}"#,
    )
    .unwrap();
    let traj = dir.path().join("t.csv");
    fs::write(&traj, "traj_id,user_id,time,entity_id,lon,lat\nt1,u1,2024-01-01T08:00:00Z,a,,\nt1,u1,2024-01-01T09:00:00Z,b,,\n").unwrap();
    let out = dir.path().join("atomic");
    let o = maprl(&["convert", "--geo", s(&geo), "--traj", s(&traj), "--city", "bj", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["bj.geo", "bj.traj", "bj.rel", "config.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(code(&maprl(&["validate", "--data", s(&out)])), 0);
    let o = maprl(&["convert", "--geo", s(&dir.path().join("missing.geojson")), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn run_then_report_reproduces_the_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(dir.path());
    let out = dir.path().join("run");
    let o = maprl(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["result.csv", "aggregate.csv", "efficiency.csv", "loss_history.csv", "summary.json", "checkpoints/seed_1.ckpt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let rep = dir.path().join("report");
    assert_eq!(code(&maprl(&["report", "--input", s(&out), "--out", s(&rep)])), 0);
    assert_eq!(fs::read(rep.join("aggregate.csv")).unwrap(), fs::read(out.join("aggregate.csv")).unwrap());

    // identical configs give identical result hashes
    let again = dir.path().join("run2");
    assert_eq!(code(&maprl(&["run", "--config", s(&cfg), "--out", s(&again)])), 0);
    let hash = |p: &Path| -> serde_json::Value { serde_json::from_str::<serde_json::Value>(&fs::read_to_string(p.join("summary.json")).unwrap()).unwrap()["result_hash"].clone() };
    assert_eq!(hash(&out), hash(&again));
}

#[test]
fn grid_is_idempotent_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("grid.json");
    fs::write(
        &spec,
        format!(
            r#"{{"base": {{"entity": "poi", "downstream": "POIC",
                "hparams": {{"dim": 8, "hidden": 16, "heads": 2, "batch": 16, "pretrain_steps": 5, "finetune_steps": 5, "eval_every": 5, "optimizer": {{"kind": "adam"}}}}}},
               "datasets": [{{"name": "tiny", "synthetic_spec": {TINY}}}], "seeds": [1], "combos": ["TokRI+MTR", "TRCL+TrajP"]}}"#
        ),
    )
    .unwrap();
    let out = dir.path().join("grid");
    let o = maprl(&["grid", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("2 run, 0 skipped"));
    let before = fs::read(out.join("results.csv")).unwrap();
    let o = maprl(&["grid", "--spec", s(&spec), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 run, 2 skipped"));
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), before);
    let rep = dir.path().join("rep");
    assert_eq!(code(&maprl(&["report", "--input", s(&out), "--out", s(&rep)])), 0);
    let md = fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("Per Avg Rank") && md.contains("TokRI+MTR"));
}
