use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ladistill"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn ladistill");
    assert!(
        out.status.success(),
        "ladistill {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_teacher_config(dir: &Path, steps: u64) -> String {
    let out = run(&["train-teacher", "--init-config"]);
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let t = &mut cfg["trainer"];
    t["dims"] = serde_json::json!([16, 32, 32, 28]);
    t["total_env_steps"] = steps.into();
    t["batch_size"] = 32.into();
    t["learn_start"] = 200.into();
    t["replay_capacity"] = 5000.into();
    t["checkpoint_every"] = 0.into();
    t["log_every"] = 500.into();
    t["eval_episodes"] = 20.into();
    let path = dir.join("teacher.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_with_code_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = bin()
        .args(["--config", missing.to_str().unwrap(), "train-teacher"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(missing.to_str().unwrap()), "{err}");
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ not json").unwrap();
    let out = bin()
        .args(["--config", path.to_str().unwrap(), "train-teacher"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn init_config_round_trips_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train-teacher", "distill", "evaluate", "reproduce-paper"] {
        let out = run(&[sub, "--init-config"]);
        let value: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(value.is_object(), "{sub}");
        let path = dir.path().join(format!("{sub}.json"));
        std::fs::write(&path, &out.stdout).unwrap();
        let again = run(&["--config", path.to_str().unwrap(), sub, "--init-config"]);
        assert_eq!(again.stdout, out.stdout, "{sub}");
    }
}

#[test]
fn deterministic_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_teacher_config(dir.path(), 1500);
    let mut hashes = Vec::new();
    for run_id in ["a", "b"] {
        let out = dir.path().join(run_id);
        run(&[
            "--config",
            &cfg,
            "--deterministic",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
            "train-teacher",
        ]);
        hashes.push((
            std::fs::read(out.join("teacher.ldnn")).unwrap(),
            std::fs::read(out.join("replay.ldrp")).unwrap(),
            manifest(&out)["artifacts"].clone(),
        ));
    }
    assert!(hashes[0] == hashes[1]);
}

#[test]
fn thousand_step_smoke_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_teacher_config(dir.path(), 1000);
    let out = dir.path().join("smoke");
    let t0 = Instant::now();
    run(&["--config", &cfg, "--out", out.to_str().unwrap(), "train-teacher"]);
    assert!(t0.elapsed().as_secs_f64() < 10.0);
    assert!(out.join("teacher.ldnn").exists());
    assert!(out.join("train_log.csv").exists());
}

#[test]
fn data_distill_evaluate_flow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg = small_teacher_config(dir.path(), 2000);
    run(&["--config", &cfg, "--deterministic", "--out", &p("t"), "train-teacher"]);
    let teacher = p("t/teacher.ldnn");

    run(&[
        "--out",
        &p("fresh"),
        "gen-distill-data",
        "--teacher",
        &teacher,
        "--mode",
        "fresh",
        "--n",
        "300",
    ]);
    run(&[
        "--out",
        &p("replay"),
        "gen-distill-data",
        "--teacher",
        &teacher,
        "--mode",
        "replay",
        "--replay",
        &p("t/replay.ldrp"),
    ]);
    assert_eq!(manifest(Path::new(&p("fresh")))["meta"]["count"], 300);

    run(&[
        "--out",
        &p("s"),
        "distill",
        "--dataset",
        &p("fresh/dataset.ldds"),
        "--dataset",
        &p("replay/dataset.ldds"),
        "--student",
        "3x32",
        "--epochs",
        "2",
    ]);
    let log = std::fs::read_to_string(p("s/distill_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let out = run(&[
        "--out",
        &p("e"),
        "evaluate",
        "--policy",
        &format!("teacher={teacher}"),
        "--policy",
        &format!("twin={teacher}"),
        "--policy",
        &format!("student={}", p("s/student.ldnn")),
        "--policy",
        "olla",
        "--reference",
        "teacher",
        "--episodes",
        "100",
    ]);
    assert!(!out.stdout.is_empty());
    let mut rdr = csv::Reader::from_path(p("e/table2.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut twins = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        if &rec[col("student")] == "twin" {
            twins += 1;
            for d in ["delta_t", "delta_bler", "delta_r"] {
                assert_eq!(rec[col(d)].parse::<f64>().unwrap(), 0.0);
            }
        }
    }
    assert_eq!(twins, 3);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let out = bin().arg("distill").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("evaluate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_policy_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--out",
            dir.path().to_str().unwrap(),
            "evaluate",
            "--policy",
            "fixed:99",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn smoke_reproduction_writes_all_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    run(&[
        "--deterministic",
        "--svg",
        "--out",
        out.to_str().unwrap(),
        "reproduce-paper",
        "--profile",
        "smoke",
    ]);
    for f in [
        "table2.csv",
        "control.csv",
        "baseline.csv",
        "js.csv",
        "metrics.csv",
        "manifest.json",
        "timings.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(out.join("table2.csv")).unwrap();
    assert_eq!(table.lines().count(), 19);
    assert!(std::fs::read_dir(&out)
        .unwrap()
        .any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));
}
