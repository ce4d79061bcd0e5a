use std::path::Path;

use geld::cli::run_command;
use geld::io::{save_checkpoint, RunReport};
use geld::model::{ModelConfig, ModelParams};

fn run(args: &[&str]) -> (i32, Option<RunReport>) {
    let mut argv = vec!["geld"];
    argv.extend_from_slice(args);
    let out = run_command(argv);
    (out.code, out.report)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_model(dir: &Path) -> std::path::PathBuf {
    let cfg = ModelConfig { hidden: 16, heads: 4, decoder_layers: 1, k_max: 10, ..ModelConfig::desk() };
    let path = dir.join("m.geld");
    save_checkpoint(&ModelParams::init(cfg, 2).unwrap(), &path).unwrap();
    path
}

#[test]
fn gen_writes_requested_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let (code, _) = run(&["gen", "--pattern", "uniform", "--n", "100", "--count", "200", "--seed", "7", "--out", s(&out)]);
    assert_eq!(code, 0);
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 200);
}

#[test]
fn solve_reports_one_row_per_instance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let ckpt = small_model(dir.path());
    assert_eq!(run(&["gen", "--n", "30", "--count", "12", "--seed", "3", "--out", s(&d)]).0, 0);
    let report_path = dir.path().join("r.json");
    let (code, rep) = run(&["solve", "--ckpt", s(&ckpt), "--in", s(&d), "--mode", "greedy", "--report", s(&report_path)]);
    assert_eq!(code, 0);
    let rep = rep.unwrap();
    assert_eq!(rep.rows.len(), 12);
    let from_file = RunReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(from_file.rows.len(), 12);
    assert!(rep.rows.iter().all(|r| r.gap_pct.is_none()));
}

#[test]
fn improve_never_loses_to_its_initial_tours() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let ckpt = small_model(dir.path());
    assert_eq!(run(&["gen", "--pattern", "clustered", "--n", "60", "--count", "6", "--seed", "5", "--out", s(&d)]).0, 0);
    let (_, ri) = run(&["--seed", "9", "solve", "--in", s(&d), "--mode", "ri"]);
    let (code, imp) = run(&["--seed", "9", "improve", "--ckpt", s(&ckpt), "--init", "ri", "--prc", "30", "--in", s(&d)]);
    assert_eq!(code, 0);
    for (a, b) in imp.unwrap().rows.iter().zip(&ri.unwrap().rows) {
        assert_eq!(a.name, b.name);
        assert!(a.length <= b.length);
    }
}

#[test]
fn exact_reference_gives_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(run(&["gen", "--n", "8", "--count", "5", "--out", s(&d)]).0, 0);
    let (_, rep) = run(&["solve", "--in", s(&d), "--mode", "brute", "--exact-reference"]);
    assert!(rep.unwrap().rows.iter().all(|r| r.gap_pct == Some(0.0)));
    let (_, rep) = run(&["bench", "--in", s(&d), "--methods", "nn2opt", "ri", "--exact-reference"]);
    let rep = rep.unwrap();
    assert_eq!(rep.rows.len(), 10);
    assert!(rep.rows.iter().all(|r| r.gap_pct.unwrap() >= -1e-9));
}

#[test]
fn usage_and_runtime_errors_exit_nonzero() {
    assert_eq!(run(&["solve", "--bogus"]).0, 2);
    assert_eq!(run(&["frobnicate"]).0, 2);
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(run(&["gen", "--n", "20", "--count", "1", "--out", s(&d)]).0, 0);
    // model methods need a checkpoint
    assert_eq!(run(&["solve", "--in", s(&d), "--mode", "greedy"]).0, 1);
    assert_eq!(run(&["solve", "--in", s(&dir.path().join("missing")), "--mode", "ri"]).0, 1);
}

#[test]
fn tiny_training_run_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.geld");
    let log = dir.path().join("log.jsonl");
    let code = run(&[
        "train", "stage1", "--out", s(&out), "--log", s(&log), "--data-n", "8", "--data-count", "40",
        "--epochs", "2", "--hidden", "16", "--heads", "4", "--decoder-layers", "1", "--k-max", "10",
    ])
    .0;
    assert_eq!(code, 0);
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 2);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for k in ["epoch", "scale", "len_g", "len_i", "loss"] {
            assert!(v.get(k).is_some());
        }
    }
    let out2 = dir.path().join("t2.geld");
    let code = run(&[
        "train", "stage2", "--init", s(&out), "--out", s(&out2), "--data-n", "8", "--data-count", "20",
        "--epochs", "1", "--n-max", "16", "--n-bs", "2", "--beam-width", "2", "--prc", "2",
    ])
    .0;
    assert_eq!(code, 0);
    assert!(geld::io::load_checkpoint(&out2).is_ok());
}

#[test]
fn grad_check_passes_on_a_small_model() {
    let code = run(&["grad-check", "--hidden", "16", "--decoder-layers", "2", "--samples", "2", "--per-param", "2"]).0;
    assert_eq!(code, 0);
}
