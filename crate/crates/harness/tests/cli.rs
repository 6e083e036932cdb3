use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use metacoop_harness::compare::{compare, compare_runs, RunData};
use metacoop_harness::metrics::{read_metrics, Summary};
use metacoop_harness::sweep::sweep;
use metacoop_harness::{run, HarnessError, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_metacoop");

fn small(root: &Path, extra: &str) -> RunConfig {
    let text = format!(
        "[run]\niterations = 6\n[eval]\nevery = 3\ntest_tasks = 5\n[output]\nroot = {:?}\n{extra}",
        root.display().to_string()
    );
    RunConfig::parse(&text).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn zero_iterations_reports_initial_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(small(tmp.path(), "").with_value("iterations", "0").unwrap()).unwrap();
    let records = read_metrics(&out.dir.join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].iteration, 0);
    assert!(records[0].loss_sum.is_none());
    assert_eq!(out.summary.iterations, 0);
    assert_eq!(out.summary.cml.loss.unwrap().mean, records[0].cml_loss.unwrap());
    assert!(out.summary.final_train_loss.is_none());
    assert!(out.dir.join("checkpoint.bin").exists());
}

#[test]
fn artifacts_and_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(small(tmp.path(), "").with_value("diag_every", "2").unwrap()).unwrap();
    for f in ["config.resolved", "metrics.jsonl", "summary.json", "checkpoint.bin"] {
        assert!(out.dir.join(f).exists(), "{f}");
    }
    let lines = fs::read_to_string(out.dir.join("metrics.jsonl")).unwrap();
    let keys: Vec<Vec<String>> = lines
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object().unwrap().keys().cloned().collect()
        })
        .collect();
    assert_eq!(keys.len(), 7);
    assert!(keys.windows(2).all(|w| w[0] == w[1]));

    let records = read_metrics(&out.dir.join("metrics.jsonl")).unwrap();
    assert!(records.windows(2).all(|w| w[0].iteration < w[1].iteration));
    let evaluated: Vec<u64> = records
        .iter()
        .filter(|r| r.cml_loss.is_some())
        .map(|r| r.iteration)
        .collect();
    assert_eq!(evaluated, vec![0, 3, 6]);
    let diagnosed: Vec<u64> = records
        .iter()
        .filter(|r| r.grad_similarity.is_some())
        .map(|r| r.iteration)
        .collect();
    assert_eq!(diagnosed, vec![2, 4, 6]);
    assert!(records[2].cka.as_ref().unwrap().contains_key("head"));
    assert!(records.iter().skip(1).all(|r| r.freeze_violations == Some(0)));
    assert!(records
        .iter()
        .filter(|r| r.cml_loss.is_some())
        .all(|r| r.dagger_loss.is_some()));

    let summary = Summary::load(&out.dir.join("summary.json")).unwrap();
    assert_eq!(summary, out.summary);
    assert_eq!(summary.status, "completed");
    assert_eq!(summary.test_tasks, 5);
    assert_eq!(
        summary.param_counts.total,
        (40 + 40) + (40 * 40 + 40) + 41 + (40 * 40 + 40) + 41
    );
}

#[test]
fn maml_has_no_dagger_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(small(tmp.path(), "[method]\nname = \"maml\"\n")).unwrap();
    assert!(out.summary.dagger.loss.is_none());
    assert!(out.summary.cml.loss.is_some());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(small(&tmp.path().join("a"), "")).unwrap();
    let b = run(small(&tmp.path().join("b"), "")).unwrap();
    let read = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a.dir), read(&b.dir));
    assert_eq!(
        fs::read(a.dir.join("checkpoint.bin")).unwrap(),
        fs::read(b.dir.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn resolved_config_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let first = run(small(&tmp.path().join("a"), "")).unwrap();
    let echoed = RunConfig::load(&first.dir.join("config.resolved")).unwrap();
    let mut again = echoed.clone();
    again.output.root = Some(tmp.path().join("b").display().to_string());
    let second = run(again).unwrap();
    assert_eq!(
        fs::read(first.dir.join("metrics.jsonl")).unwrap(),
        fs::read(second.dir.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn serial_and_parallel_runs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(small(&tmp.path().join("a"), "")).unwrap();
    let b = run(small(&tmp.path().join("b"), "")
        .with_value("parallel", "false")
        .unwrap())
    .unwrap();
    assert_eq!(
        fs::read(a.dir.join("metrics.jsonl")).unwrap(),
        fs::read(b.dir.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn sinusoid_preset_resolves_to_the_published_settings() {
    let cfg = RunConfig::load(&preset("sinusoid-k5.toml")).unwrap().resolve().unwrap();
    let echoed: toml::Table = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
    let get = |s: &str, k: &str| echoed[s][k].clone();
    assert_eq!(get("task", "family").as_str(), Some("sine"));
    assert_eq!(get("task", "k_shot").as_integer(), Some(5));
    assert_eq!(
        get("model", "hidden_dims"),
        toml::Value::Array(vec![40.into(), 40.into()])
    );
    assert_eq!(get("model", "co_hidden_dims"), toml::Value::Array(vec![40.into()]));
    assert_eq!(get("method", "inner_lr").as_float(), Some(0.01));
    assert_eq!(get("method", "gamma").as_float(), Some(0.2));
    assert_eq!(get("method", "inner_steps").as_integer(), Some(1));
    assert_eq!(get("method", "task_batch").as_integer(), Some(4));
    assert_eq!(get("run", "iterations").as_integer(), Some(10_000));
    assert_eq!(get("eval", "test_tasks").as_integer(), Some(600));
    assert_eq!(get("task", "test_grid").as_integer(), Some(100));
    for name in [
        "sinusoid-k5-maml.toml",
        "cluster-cml.toml",
        "cluster-noise.toml",
        "cluster-cl.toml",
    ] {
        RunConfig::load(&preset(name)).unwrap().resolve().unwrap();
    }
}

#[test]
fn divergence_keeps_partial_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path(), "[optimizer]\nkind = \"sgd\"\nlr = 1e300\n");
    let dir = cfg.clone().resolve().unwrap().run_dir();
    match run(cfg) {
        Err(e @ HarnessError::Divergence { .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected divergence, got {other:?}"),
    }
    let records = read_metrics(&dir.join("metrics.jsonl")).unwrap();
    assert!(!records.is_empty());
    let summary = Summary::load(&dir.join("summary.json")).unwrap();
    assert_eq!(summary.status, "diverged");
    assert!(summary.diverged_at.is_some());
}

#[test]
fn compare_with_itself_has_zero_deltas() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(small(tmp.path(), "")).unwrap();
    let csv_path = tmp.path().join("compare.csv");
    let cmp = compare(&[out.dir.clone(), out.dir.clone()], "cml_loss", &csv_path).unwrap();
    assert_eq!(cmp.rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 3, 6]);
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let header = reader.headers().unwrap().clone();
    let delta = header.iter().position(|h| h.starts_with("delta_")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[3][0], "final");
    for r in &rows {
        assert_eq!(r[delta].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn compare_rejects_mismatched_protocols_and_unknown_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(small(&tmp.path().join("a"), "")).unwrap();
    let b = run(small(&tmp.path().join("b"), "").with_value("test_tasks", "4").unwrap()).unwrap();
    let runs = [RunData::load(&a.dir).unwrap(), RunData::load(&b.dir).unwrap()];
    assert!(matches!(
        compare_runs(&runs, "cml_loss"),
        Err(HarnessError::Mismatch(_))
    ));
    assert!(matches!(
        compare_runs(&runs[..1], "no_such_metric"),
        Err(HarnessError::Mismatch(_))
    ));
}

#[test]
fn maml_and_cml_compare_on_shared_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run(small(tmp.path(), "[method]\nname = \"maml\"\n")).unwrap();
    let b = run(small(tmp.path(), "")).unwrap();
    let cmp = compare(&[a.dir, b.dir], "cml_loss", &tmp.path().join("c.csv")).unwrap();
    assert_eq!(cmp.labels, vec!["maml-sine-k5-s0", "cml-sine-k5-s0"]);
    assert!(cmp.final_values.iter().all(Option::is_some));
    assert!(cmp.render().contains("delta_cml-sine-k5-s0"));
}

#[test]
fn single_value_sweep_equals_run() {
    let tmp = tempfile::tempdir().unwrap();
    let base = small(&tmp.path().join("s"), "");
    let plain = run(small(&tmp.path().join("r"), "")).unwrap();
    let result = sweep(&base, "gamma", &["0.2".to_string()]).unwrap();
    assert_eq!(result.entries.len(), 1);
    assert_eq!(
        fs::read(plain.dir.join("metrics.jsonl")).unwrap(),
        fs::read(result.entries[0].dir.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn gamma_sweep_produces_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let base = small(tmp.path(), "").with_value("iterations", "2").unwrap();
    let values: Vec<String> = ["0.2", "0.5", "0.8", "1.0"].map(String::from).to_vec();
    let result = sweep(&base, "gamma", &values).unwrap();
    let mut reader = csv::Reader::from_path(&result.table).unwrap();
    assert_eq!(&reader.headers().unwrap()[0], "gamma");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(), values);
    assert!(rows.iter().all(|r| &r[1] == "completed"));
    let dirs: std::collections::BTreeSet<_> = result.entries.iter().map(|e| e.dir.clone()).collect();
    assert_eq!(dirs.len(), 4);
}

#[test]
fn sweep_rejects_unknown_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let err = sweep(&small(tmp.path(), ""), "warp_factor", &["1".into()]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", "[task\n");
    let status = Command::new(BIN).args(["run", bad.to_str().unwrap()]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let unknown = write_config(tmp.path(), "unknown.toml", "[method]\nname = \"reptile\"\n");
    let status = Command::new(BIN)
        .args(["run", unknown.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let diverge = write_config(
        tmp.path(),
        "diverge.toml",
        "[run]\niterations = 3\n[eval]\ntest_tasks = 2\n[optimizer]\nkind = \"sgd\"\nlr = 1e300\n",
    );
    let status = Command::new(BIN)
        .args(["run", diverge.to_str().unwrap()])
        .env("METACOOP_OUT", tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    assert!(tmp.path().join("out/cml-sine-k5-s0/metrics.jsonl").exists());
}

#[test]
fn cli_run_compare_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[run]\niterations = 2\n[eval]\ntest_tasks = 3\n[output]\nroot = \"ignored\"\n",
    );
    let ok = Command::new(BIN)
        .args(["run", cfg.to_str().unwrap()])
        .env("METACOOP_OUT", &out)
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let dir = out.join("cml-sine-k5-s0");
    assert!(dir.join("summary.json").exists());

    let table = tmp.path().join("cmp.csv");
    let ok = Command::new(BIN)
        .args([
            "compare",
            dir.to_str().unwrap(),
            dir.to_str().unwrap(),
            "--metric",
            "cml_loss",
            "--out",
        ])
        .arg(&table)
        .output()
        .unwrap();
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("final"));
    assert!(table.exists());

    let ok = Command::new(BIN)
        .args(["sweep", cfg.to_str().unwrap(), "--axis", "k_shot", "--values", "5,10"])
        .env("METACOOP_OUT", &out)
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(out.join("cml-sine-k5-s0-k_shot-10/summary.json").exists());

    let bad_axis = Command::new(BIN)
        .args(["sweep", cfg.to_str().unwrap(), "--axis", "nope", "--values", "1"])
        .env("METACOOP_OUT", &out)
        .status()
        .unwrap();
    assert_eq!(bad_axis.code(), Some(2));
}
