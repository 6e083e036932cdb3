//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 2 3`.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use metacoop_core::selftest::{
    autodiff_oracle, descent_identity, diagnostics_properties, freeze_invariant, gamma_collapse, meta_gradient_oracle,
    CheckOutcome,
};
use metacoop_harness::metrics::{read_metrics, Summary};
use metacoop_harness::{run, RunConfig};

const SEEDS: [u64; 3] = [0, 1, 2];
const SHOTS: [usize; 3] = [5, 10, 20];
const SELFTEST_LIMIT_SECONDS: f64 = 120.0;

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Loads a preset and points it at `root` with the given seed; test metrics
/// are computed once, at the end.
fn configure(name: &str, root: &Path, seed: u64, edits: &[(&str, String)]) -> RunConfig {
    let mut cfg = RunConfig::load(&preset(name)).expect("preset parses");
    cfg.run.seed = seed;
    cfg.eval.every = 0;
    cfg.output.root = Some(root.display().to_string());
    for (axis, value) in edits {
        cfg = cfg.with_value(axis, value).expect("valid override");
    }
    cfg
}

struct Trained {
    summary: Summary,
    freeze_violations: usize,
    iterations: u64,
}

fn train(cfg: RunConfig) -> Trained {
    let out = run(cfg).expect("run completes");
    let records = read_metrics(&out.dir.join("metrics.jsonl")).expect("metrics readable");
    Trained {
        freeze_violations: records.iter().filter_map(|r| r.freeze_violations).sum(),
        iterations: out.summary.iterations,
        summary: out.summary,
    }
}

fn cml_mse(t: &Trained) -> f64 {
    t.summary.cml.loss.expect("test loss recorded").mean
}

fn from_check(id: u32, name: &'static str, c: CheckOutcome) -> Verdict {
    Verdict {
        id,
        name,
        passed: c.passed,
        detail: c.detail,
    }
}

/// K-shot sinusoid: CML-mode test MSE of CML against MAML on paired runs.
fn sinusoid_advantage(root: &Path, freeze: &mut Vec<(String, usize, u64)>) -> Verdict {
    let started = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    for k in SHOTS {
        let mut maml = Vec::new();
        let mut cml = Vec::new();
        for seed in SEEDS {
            let edits = [("k_shot", k.to_string())];
            let m = train(configure("sinusoid-k5-maml.toml", root, seed, &edits));
            let c = train(configure("sinusoid-k5.toml", root, seed, &edits));
            freeze.push((format!("sine cml k{k} s{seed}"), c.freeze_violations, c.iterations));
            maml.push(cml_mse(&m));
            cml.push(cml_mse(&c));
        }
        let wins = cml.iter().zip(&maml).filter(|(c, m)| c <= m).count();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ok = wins >= 2 && mean(&cml) <= mean(&maml);
        passed &= ok;
        let pairs: Vec<String> = cml.iter().zip(&maml).map(|(c, m)| format!("{c:.4}/{m:.4}")).collect();
        parts.push(format!(
            "K={k} cml/maml [{}] wins {wins}/3 mean {:.4}/{:.4}",
            pairs.join(" "),
            mean(&cml),
            mean(&maml)
        ));
    }
    Verdict {
        id: 1,
        name: "sinusoid advantage",
        passed,
        detail: format!("{}; {:.0}s", parts.join("; "), started.elapsed().as_secs_f64()),
    }
}

struct ClusterRuns {
    cml: Vec<Trained>,
    noise: Vec<Trained>,
    cl: Vec<Trained>,
}

fn cluster_runs(root: &Path) -> ClusterRuns {
    let each = |name| SEEDS.iter().map(|&s| train(configure(name, root, s, &[]))).collect();
    ClusterRuns {
        cml: each("cluster-cml.toml"),
        noise: each("cluster-noise.toml"),
        cl: each("cluster-cl.toml"),
    }
}

/// Meta-learner training loss averaged over the final 100 iterations.
fn training_loss(t: &Trained) -> f64 {
    t.summary.tail_train_loss.expect("training loss recorded")
}

fn noise_vs_cml(runs: &ClusterRuns) -> Verdict {
    let pairs: Vec<(f64, f64)> = runs
        .cml
        .iter()
        .zip(&runs.noise)
        .map(|(c, n)| (training_loss(c), training_loss(n)))
        .collect();
    let wins = pairs.iter().filter(|(c, n)| c < n).count();
    let shown: Vec<String> = pairs.iter().map(|(c, n)| format!("{c:.4}/{n:.4}")).collect();
    let last: Vec<String> = runs
        .cml
        .iter()
        .zip(&runs.noise)
        .map(|(c, n)| {
            format!(
                "{:.4}/{:.4}",
                c.summary.final_train_loss.unwrap(),
                n.summary.final_train_loss.unwrap()
            )
        })
        .collect();
    Verdict {
        id: 8,
        name: "cml vs noise training loss",
        passed: wins == SEEDS.len(),
        detail: format!(
            "cml/noise last-100 training loss [{}], cml lower on {wins}/3 seeds (last batch [{}])",
            shown.join(" "),
            last.join(" ")
        ),
    }
}

fn cl_vs_cml(runs: &ClusterRuns) -> Verdict {
    let sim = |t: &Trained| t.summary.mean_grad_similarity.expect("similarity recorded");
    let pairs: Vec<(f64, f64)> = runs.cml.iter().zip(&runs.cl).map(|(c, l)| (sim(c), sim(l))).collect();
    let wins = pairs.iter().filter(|(c, l)| c < l && *c > 0.0).count();
    let shown: Vec<String> = pairs.iter().map(|(c, l)| format!("{c:.4}/{l:.4}")).collect();
    Verdict {
        id: 9,
        name: "cml vs cl gradient similarity",
        passed: wins >= 2,
        detail: format!(
            "cml/cl mean similarity [{}], cml lower and positive on {wins}/3 seeds",
            shown.join(" ")
        ),
    }
}

fn freeze(check: CheckOutcome, runs: &[(String, usize, u64)]) -> Verdict {
    let violations: usize = runs.iter().map(|r| r.1).sum();
    let iterations: u64 = runs.iter().map(|r| r.2).sum();
    Verdict {
        id: 4,
        name: "freeze invariant",
        passed: check.passed && violations == 0,
        detail: format!(
            "{}; {} full training runs, {iterations} iterations, {violations} violations",
            check.detail,
            runs.len()
        ),
    }
}

fn determinism(root: &Path) -> Verdict {
    let bin = env!("CARGO_BIN_EXE_metacoop");
    let mut ok = true;
    let mut notes = Vec::new();
    std::fs::create_dir_all(root).expect("writable");
    for (name, edits) in [
        (
            "sinusoid-k5.toml",
            "[run]\niterations = 200\n[eval]\nevery = 50\ndiag_every = 25\ntest_tasks = 50\n",
        ),
        (
            "cluster-cml.toml",
            "[run]\niterations = 200\n[eval]\nevery = 50\ndiag_every = 25\ntest_tasks = 20\n",
        ),
    ] {
        let base = std::fs::read_to_string(preset(name)).expect("preset readable");
        let mut table: toml::Table = toml::from_str(&base).expect("preset parses");
        let over: toml::Table = toml::from_str(edits).expect("override parses");
        for (section, values) in over {
            let dst = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(Default::default()));
            for (k, v) in values.as_table().expect("section").clone() {
                dst.as_table_mut().expect("section").insert(k, v);
            }
        }
        let cfg = root.join(name);
        std::fs::write(&cfg, toml::to_string(&table).expect("serializable")).expect("writable");
        let mut outputs = Vec::new();
        for attempt in ["a", "b"] {
            let out = Command::new(bin)
                .arg("run")
                .arg(&cfg)
                .env("METACOOP_OUT", root.join(attempt))
                .output()
                .expect("binary runs");
            ok &= out.status.success();
            let stdout = String::from_utf8_lossy(&out.stdout);
            let dir = PathBuf::from(stdout.lines().next().unwrap_or_default());
            outputs.push(std::fs::read(dir.join("metrics.jsonl")).unwrap_or_default());
        }
        let same = !outputs[0].is_empty() && outputs[0] == outputs[1];
        ok &= same;
        notes.push(format!("{name}: {} bytes, identical {same}", outputs[0].len()));
    }
    Verdict {
        id: 10,
        name: "determinism",
        passed: ok,
        detail: notes.join("; "),
    }
}

fn selftest_cli() -> Verdict {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_metacoop"))
        .arg("selftest")
        .output()
        .expect("binary runs");
    let seconds = started.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let checks = stdout
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .count();
    let passed = out.status.success() && checks == 6 && !stdout.contains("FAIL") && seconds < SELFTEST_LIMIT_SECONDS;
    Verdict {
        id: 11,
        name: "selftest command",
        passed,
        detail: format!(
            "exit {:?}, {checks} checks, {seconds:.1}s (limit {SELFTEST_LIMIT_SECONDS}s)",
            out.status.code()
        ),
    }
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |id: u32| wanted.is_empty() || wanted.contains(&id);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut verdicts = Vec::new();
    let mut freeze_runs = Vec::new();

    if on(1) {
        verdicts.push(sinusoid_advantage(&root.join("sine"), &mut freeze_runs));
    }
    if on(2) {
        verdicts.push(from_check(2, "meta-gradient oracle", meta_gradient_oracle(0)));
    }
    if on(3) {
        verdicts.push(from_check(3, "autodiff oracle", autodiff_oracle(0, 100)));
    }
    let cluster = (on(4) || on(8) || on(9)).then(|| cluster_runs(&root.join("cluster")));
    if on(4) {
        if let Some(c) = &cluster {
            for (label, runs) in [("cluster cml", &c.cml), ("cluster noise", &c.noise)] {
                for (seed, t) in SEEDS.iter().zip(runs) {
                    freeze_runs.push((format!("{label} s{seed}"), t.freeze_violations, t.iterations));
                }
            }
        }
        verdicts.push(freeze(freeze_invariant(0, 300), &freeze_runs));
    }
    if on(5) {
        verdicts.push(from_check(5, "gamma collapse", gamma_collapse(0, 100)));
    }
    if on(6) {
        verdicts.push(from_check(6, "descent identity", descent_identity(0, 50)));
    }
    if on(7) {
        verdicts.push(from_check(7, "diagnostics properties", diagnostics_properties(0)));
    }
    if let Some(c) = &cluster {
        if on(8) {
            verdicts.push(noise_vs_cml(c));
        }
        if on(9) {
            verdicts.push(cl_vs_cml(c));
        }
    }
    if on(10) {
        verdicts.push(determinism(&root.join("determinism")));
    }
    if on(11) {
        verdicts.push(selftest_cli());
    }

    verdicts.sort_by_key(|v| v.id);
    for v in &verdicts {
        println!(
            "{} {:>2} {}: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.id,
            v.name,
            v.detail
        );
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
