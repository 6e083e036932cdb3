//! The `run` command: meta-train, evaluate and persist one experiment.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use metacoop_core::checkpoint::save_params;
use metacoop_core::diagnostics::{cka_before_after, last_layer_similarity, per_layer_grad_norms};
use metacoop_core::tasks::{eval_tasks, probe_tasks, train_batch};
use metacoop_core::{
    init_params, meta_test, CoreError, MetaConfig, MetaTrainer, ParamSet, Partition, StepReport, Task, TestMode,
    TestReport,
};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsRecord, MetricsWriter, ModeSummary, ParamCounts, Stat, Summary};

/// Iterations averaged into [`Summary::tail_train_loss`].
const TAIL: usize = 100;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub summary: Summary,
}

struct Evaluation {
    cml: TestReport,
    dagger: Option<TestReport>,
}

fn evaluate(params: &ParamSet, tasks: &[Task], cfg: &MetaConfig, with_dagger: bool) -> Result<Evaluation> {
    Ok(Evaluation {
        cml: meta_test(params, tasks, TestMode::Cml, cfg)?,
        dagger: if with_dagger {
            Some(meta_test(params, tasks, TestMode::CmlDagger, cfg)?)
        } else {
            None
        },
    })
}

fn mode_summary(r: &TestReport) -> ModeSummary {
    ModeSummary {
        loss: Some(Stat {
            mean: r.mean_loss(),
            std: r.std_loss(),
        }),
        accuracy: r
            .mean_accuracy()
            .zip(r.std_accuracy())
            .map(|(mean, std)| Stat { mean, std }),
    }
}

fn fill_eval(record: &mut MetricsRecord, e: &Evaluation) {
    record.cml_loss = Some(e.cml.mean_loss());
    record.cml_loss_std = Some(e.cml.std_loss());
    record.cml_accuracy = e.cml.mean_accuracy();
    if let Some(d) = &e.dagger {
        record.dagger_loss = Some(d.mean_loss());
        record.dagger_loss_std = Some(d.std_loss());
        record.dagger_accuracy = d.mean_accuracy();
    }
}

fn fill_step(record: &mut MetricsRecord, r: &StepReport) {
    let n = r.tasks as f64;
    record.loss_sum = Some(r.loss_sum);
    record.loss_mean = Some(r.loss_sum / n);
    record.meta_loss_mean = Some(r.meta_loss_sum / n);
    record.co_loss_mean = Some(r.co_loss_sum / n);
    record.freeze_violations = Some(r.freeze_violations);
}

fn param_counts(p: &ParamSet) -> ParamCounts {
    ParamCounts {
        feature_extractor: p.count(Some(Partition::FeatureExtractor)),
        meta_head: p.count(Some(Partition::MetaHead)),
        co_head: p.count(Some(Partition::CoHead)),
        total: p.count(None),
    }
}

/// Resolves `config` and runs it, writing `config.resolved`,
/// `metrics.jsonl`, `checkpoint.bin` and `summary.json` into the run
/// directory.
pub fn run(config: RunConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let cfg = config.resolve()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.resolved"), cfg.to_toml()?)?;

    let family = cfg.family()?;
    let meta_cfg = cfg.meta_config();
    let seed = cfg.run.seed;
    let params = init_params(&cfg.model_spec(family.as_ref()), seed)?;
    let mut trainer = MetaTrainer::new(meta_cfg.clone(), params)?;
    let with_dagger = trainer.method().outer_co_weight(meta_cfg.gamma).is_some();
    let test = eval_tasks(family.as_ref(), seed, cfg.test_tasks())?;
    let probes = if cfg.eval.diag_every > 0 {
        probe_tasks(family.as_ref(), seed, cfg.probe_tasks())?
    } else {
        Vec::new()
    };

    let mut summary = Summary {
        method: trainer.method().name().to_string(),
        family: family.name().to_string(),
        k_shot: cfg.task.k_shot,
        seed,
        status: "completed".into(),
        test_tasks: test.len(),
        param_counts: param_counts(trainer.params()),
        ..Default::default()
    };
    let mut writer = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let method_name = summary.method.clone();
    let record = |iteration| MetricsRecord {
        iteration,
        method: method_name.clone(),
        ..Default::default()
    };

    let mut last_eval = evaluate(trainer.params(), &test, &meta_cfg, with_dagger)?;
    let mut first = record(0);
    fill_eval(&mut first, &last_eval);
    writer.write(&first)?;

    let mut tail: VecDeque<f64> = VecDeque::with_capacity(TAIL);
    let mut similarities = Vec::new();
    let iterations = cfg.run.iterations;
    for it in 0..iterations {
        let done = it + 1;
        let tasks = train_batch(family.as_ref(), seed, it, meta_cfg.task_batch)?;
        let diag = cfg.eval.diag_every > 0 && done % cfg.eval.diag_every == 0;
        let report = match trainer.step(&tasks, diag) {
            Ok(r) => r,
            Err(CoreError::Divergence { iteration, detail }) => {
                summary.status = "diverged".into();
                summary.iterations = it;
                summary.diverged_at = Some(iteration);
                summary.wall_time_seconds = started.elapsed().as_secs_f64();
                fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
                return Err(HarnessError::Divergence { iteration, detail });
            }
            Err(e) => return Err(e.into()),
        };
        let mut rec = record(done);
        fill_step(&mut rec, &report);
        if tail.len() == TAIL {
            tail.pop_front();
        }
        tail.push_back(report.meta_loss_sum / report.tasks as f64);

        if let Some(grads) = &report.grad_report {
            let sim = last_layer_similarity(grads)?.value;
            similarities.push(sim);
            rec.grad_similarity = Some(sim);
            rec.grad_norms = Some(per_layer_grad_norms(grads).into_iter().collect());
            let cka = cka_before_after(trainer.params(), &probes, &meta_cfg)?;
            rec.cka = Some(cka.into_iter().map(|(k, s)| (k, s.value)).collect::<BTreeMap<_, _>>());
        }
        let eval_now = done == iterations || (cfg.eval.every > 0 && done % cfg.eval.every == 0);
        if eval_now {
            last_eval = evaluate(trainer.params(), &test, &meta_cfg, with_dagger)?;
            fill_eval(&mut rec, &last_eval);
        }
        writer.write(&rec)?;

        let every = cfg.output.checkpoint_every;
        if every > 0 && done % every == 0 {
            save_params(trainer.params(), &dir.join("checkpoint.bin"))?;
        }
        if done == iterations {
            summary.final_train_loss = rec.meta_loss_mean;
        }
    }
    save_params(trainer.params(), &dir.join("checkpoint.bin"))?;

    summary.iterations = iterations;
    summary.cml = mode_summary(&last_eval.cml);
    summary.dagger = last_eval.dagger.as_ref().map(mode_summary).unwrap_or_default();
    if !tail.is_empty() {
        summary.tail_train_loss = Some(tail.iter().sum::<f64>() / tail.len() as f64);
    }
    if !similarities.is_empty() {
        summary.mean_grad_similarity = Some(similarities.iter().sum::<f64>() / similarities.len() as f64);
    }
    summary.wall_time_seconds = started.elapsed().as_secs_f64();
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(RunOutcome {
        dir,
        config: cfg,
        summary,
    })
}
