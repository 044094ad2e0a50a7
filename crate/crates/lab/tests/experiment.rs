use std::path::{Path, PathBuf};
use std::process::Command;

use tailspace::config::{AlphaPolicy, ExperimentConfig};
use tailspace::experiment::{compare, run_experiment, RunManifest, RunStatus};
use tailspace::LabError;

fn config(strategies: &str, ranks: &str, seeds: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "model": {{ "layers": [
                {{ "name": "fc.0", "d_in": 8, "d_out": 10, "activation": "gelu" }},
                {{ "name": "out.0", "d_in": 10, "d_out": 6, "activation": "identity" }}
            ] }},
            "task": {{ "kind": "teacher_student", "n_train": 96, "teacher_rank": 3, "shift": 0.3 }},
            "strategies": {strategies},
            "ranks": {ranks},
            "seeds": {seeds},
            "calibration": {{ "n_samples": 16 }},
            "train": {{ "learning_rate": 0.01, "batch_size": 32, "epochs": 2 }}
        }}"#
    ))
    .unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn defaults_follow_the_reference_setup() {
    let c = config(r#"["vanilla"]"#, "[8]", "[0]");
    assert_eq!(c.alpha, AlphaPolicy::EqualToRank);
    assert_eq!(c.alpha.alpha(8), 8.0);
    assert_eq!(c.calibration.n_samples, 16);
    assert_eq!(c.calibration.batch_size, 1);
    assert_eq!(c.targets(), ["fc.0", "out.0"]);
    assert_eq!(c.output_dir, PathBuf::from("runs"));
    let fixed: AlphaPolicy = serde_json::from_str(r#"{"fixed": 16.0}"#).unwrap();
    assert_eq!(fixed.alpha(4), 16.0);
}

#[test]
fn validation_reports_every_violation() {
    let mut c = config("[]", "[0, 7]", "[]");
    c.target_layers = vec!["nope".into()];
    c.alpha = AlphaPolicy::Fixed(-1.0);
    c.calibration.n_samples = 0;
    c.train.batch_size = 0;
    let v = c.violations();
    for needle in ["strategies", "seeds", "unknown target layer `nope`", "fixed alpha", "n_samples", "train:"] {
        assert!(v.iter().any(|m| m.contains(needle)), "missing `{needle}` in {v:?}");
    }
    let mut c = config(r#"["vanilla"]"#, "[0, 7]", "[1, 1]");
    c.target_layers.clear();
    let v = c.violations();
    assert!(v.iter().any(|m| m.contains("rank 0")));
    assert!(v.iter().any(|m| m.contains("rank 7 out of range 1..=6 for layer `out.0`")));
    assert!(v.iter().any(|m| m.contains("duplicate seed")));
    assert!(matches!(run_experiment(&c, Path::new("/nonexistent")), Err(LabError::Validation(_))));
    assert!(ExperimentConfig::from_json(r#"{"model": {"layers": []}, "bogus": 1}"#).is_err());
}

#[test]
fn hash_ignores_location_but_not_behavior() {
    let a = config(r#"["vanilla"]"#, "[2]", "[0]");
    let mut b = a.clone();
    b.output_dir = PathBuf::from("elsewhere");
    b.parallel = true;
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
    let mut c = a.clone();
    c.train.learning_rate = 0.02;
    assert_ne!(a.hash(), c.hash());
    let mut d = a.clone();
    d.seeds = vec![1];
    assert_ne!(a.hash(), d.hash());
    let reparsed = ExperimentConfig::from_json(&a.to_json()).unwrap();
    assert_eq!(reparsed.hash(), a.hash());
}

#[test]
fn singleton_grid_has_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(r#"["vanilla"]"#, "[2]", "[0]");
    let m = run_experiment(&c, dir.path()).unwrap();
    assert_eq!(m.runs.len(), 1);
    assert_eq!(m.config_hash, c.hash());
    let run = &m.runs[0];
    assert_eq!(run.status, RunStatus::Completed);
    let mut paths: Vec<&PathBuf> = [&run.metrics, &run.summary, &run.report_pre, &run.report_post, &run.model]
        .into_iter()
        .map(|p| p.as_ref().unwrap())
        .collect();
    paths.extend(&run.adapters);
    assert_eq!(run.adapters.len(), 2);
    for p in paths {
        assert!(dir.path().join(p).is_file(), "{}", p.display());
    }
    assert!(dir.path().join(&run.dir).join("report_post.out.0.spectrum.tspm").is_file());
    assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
    assert!(!dir.path().join("manifest.json.tmp").exists());

    let table = compare(&m, dir.path());
    assert_eq!(table.rows.len(), 1);
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join(run.summary.as_ref().unwrap()))).unwrap();
    assert_eq!(table.rows[0].mean_final_loss, summary["final_loss"].as_f64());
}

#[test]
fn grid_cardinality_ordering_and_means() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(r#"["astra_tail", "quantile:top"]"#, "[2, 4]", "[0, 1]");
    let m = run_experiment(&c, dir.path()).unwrap();
    assert_eq!(m.runs.len(), 8);
    assert_eq!(m.failed(), 0);
    let table = compare(&m, dir.path());
    assert_eq!(table.rows.len(), 4);
    let losses: Vec<f64> = table.rows.iter().map(|r| r.mean_final_loss.unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[0] <= w[1]), "{losses:?}");
    for row in &table.rows {
        let finals: Vec<f64> = m
            .runs
            .iter()
            .filter(|r| r.strategy == row.strategy && r.rank == row.rank)
            .map(|r| {
                let s: serde_json::Value = serde_json::from_slice(&read(&dir.path().join(r.summary.as_ref().unwrap()))).unwrap();
                s["final_loss"].as_f64().unwrap()
            })
            .collect();
        assert_eq!(finals.len(), 2);
        let mean = (finals[0] + finals[1]) / 2.0;
        assert!((row.mean_final_loss.unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }
    let csv = table.to_csv();
    assert!(csv.starts_with("strategy,rank,runs,missing,mean_final_loss,mean_final_grad_norm,delta_effective_rank\n"));
}

#[test]
fn parallel_and_sequential_runs_write_identical_files() {
    let c = config(r#"["astra_tail", "vanilla"]"#, "[3]", "[0, 1]");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = run_experiment(&c, a.path()).unwrap();
    let mb = run_experiment(&ExperimentConfig { parallel: true, ..c.clone() }, b.path()).unwrap();
    assert_eq!(ma, mb);
    for run in &ma.runs {
        for p in [&run.metrics, &run.report_post, &run.model] {
            let p = p.as_ref().unwrap();
            assert_eq!(read(&a.path().join(p)), read(&b.path().join(p)), "{}", p.display());
        }
    }
}

#[test]
fn failed_runs_are_recorded_and_tabulated_as_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(r#"["vanilla", "pissa"]"#, "[2]", "[0]");
    c.train.learning_rate = 1e300;
    let m = run_experiment(&c, dir.path()).unwrap();
    assert_eq!(m.runs.len(), 2);
    assert_eq!(m.failed(), 2);
    assert!(m.runs.iter().all(|r| matches!(&r.status, RunStatus::Failed { error } if error.contains("non-finite"))), "{:?}", m.runs);
    let table = compare(&m, dir.path());
    assert!(table.has_gaps());
    assert!(table.to_csv().contains(",0,1,NA,NA,NA"));
}

#[test]
fn missing_artifacts_are_marked() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(r#"["vanilla"]"#, "[2]", "[0, 1]");
    let m = run_experiment(&c, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join(m.runs[1].summary.as_ref().unwrap())).unwrap();
    let table = compare(&m, dir.path());
    assert_eq!((table.rows[0].runs, table.rows[0].missing), (1, 1));
}

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tailspace")).args(args).args(["--log-level", "off"]).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let out = dir.path().join("out");
    let (cfg_s, out_s) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    std::fs::write(&cfg, config(r#"["astra_tail"]"#, "[2]", "[0]").to_json()).unwrap();
    let (code, stdout) = cli(&["experiment", "--config", cfg_s, "--out", out_s]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("strategy,rank,"));
    assert_eq!(cli(&["compare", "--out", out_s]).0, 0);
    assert!(out.join("comparison.csv").is_file());

    assert_eq!(cli(&["calibrate", "--config", cfg_s, "--out", out_s]).0, 0);
    assert!(out.join("fc.0.cov.tspm").is_file());
    assert_eq!(cli(&["init", "--config", cfg_s, "--out", out_s, "--strategy", "quantile:q1", "--rank", "3"]).0, 0);
    let ckpt = out.join("model.ckpt");
    assert!(out.join("adapters").join("out.0.adapter").is_file());
    let (code, stdout) = cli(&["analyze", "--config", cfg_s, "--out", out_s, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("layer,type,index,effective_rank\nfc.0,fc,0,"));
    assert_eq!(cli(&["train", "--config", cfg_s, "--out", out_s, "--seed", "5", "--strategy", "milora"]).0, 0);
    assert!(out.join("runs/milora_r2_s5/metrics.csv").is_file());

    std::fs::write(&cfg, r#"{"model": {"layers": []}, "task": {"kind": "teacher_student", "n_train": 0, "teacher_rank": 1, "shift": 0.1}, "strategies": [], "ranks": [1], "seeds": [0]}"#).unwrap();
    assert_eq!(cli(&["experiment", "--config", cfg_s, "--out", out_s]).0, 1);
    assert_eq!(cli(&["experiment", "--out", out_s]).0, 1);

    let mut failing = config(r#"["vanilla"]"#, "[2]", "[0]");
    failing.train.learning_rate = 1e300;
    std::fs::write(&cfg, failing.to_json()).unwrap();
    let bad_out = dir.path().join("bad");
    assert_eq!(cli(&["experiment", "--config", cfg_s, "--out", bad_out.to_str().unwrap()]).0, 2);
    assert_eq!(cli(&["compare", "--out", bad_out.to_str().unwrap()]).0, 2);
}
