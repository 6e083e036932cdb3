//! The `compare` command: align one metric across run directories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{read_metrics, MetricsRecord, Summary};

/// One loaded run directory.
#[derive(Clone, Debug)]
pub struct RunData {
    pub label: String,
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub summary: Option<Summary>,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join("config.resolved"))?;
        let records = read_metrics(&dir.join("metrics.jsonl"))?;
        let summary_path = dir.join("summary.json");
        let summary = if summary_path.exists() {
            Some(Summary::load(&summary_path)?)
        } else {
            None
        };
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            label,
            config,
            records,
            summary,
        })
    }

    fn value_at(&self, iteration: u64, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.iteration == iteration)
            .and_then(|r| r.get(metric))
    }

    /// Value of `metric` for the final parameters: the summary entry when
    /// present, else the last recorded value.
    fn final_value(&self, metric: &str) -> Option<f64> {
        self.summary
            .as_ref()
            .and_then(|s| s.flat().get(metric).copied())
            .or_else(|| self.records.iter().rev().find_map(|r| r.get(metric)))
    }
}

/// The settings that define the test protocol. Runs are comparable only if
/// these agree.
fn protocol(c: &RunConfig) -> String {
    format!(
        "family={} k_shot={} query_size={:?} test_grid={} n_way={} query_per_class={} dim={} spread={} \
         test_tasks={:?} seed={} inner_lr={} inner_steps={}",
        c.task.family,
        c.task.k_shot,
        c.task.query_size,
        c.task.test_grid,
        c.task.n_way,
        c.task.query_per_class,
        c.task.dim,
        c.task.spread,
        c.eval.test_tasks,
        c.run.seed,
        c.method.inner_lr,
        c.method.inner_steps,
    )
}

/// Aligned comparison of one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub labels: Vec<String>,
    /// `(iteration, value per run)`, over the union of iterations where any
    /// run recorded the metric.
    pub rows: Vec<(u64, Vec<Option<f64>>)>,
    pub final_values: Vec<Option<f64>>,
}

fn delta(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let base = values.first().copied().flatten();
    values[1..].iter().map(|v| Some(v.as_ref()? - base?)).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Comparison {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["iteration".to_string()];
        h.extend(self.labels.iter().cloned());
        h.extend(self.labels[1..].iter().map(|l| format!("delta_{l}")));
        h
    }

    /// Table rows as strings; deltas are relative to the first run and the
    /// last row, labelled `final`, holds the final-parameter values.
    pub fn table(&self) -> Vec<Vec<String>> {
        let line = |first: String, values: &[Option<f64>]| {
            let mut row = vec![first];
            row.extend(values.iter().copied().map(cell));
            row.extend(delta(values).into_iter().map(cell));
            row
        };
        let mut out: Vec<_> = self.rows.iter().map(|(it, v)| line(it.to_string(), v)).collect();
        out.push(line("final".into(), &self.final_values));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for row in self.table() {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fixed-width rendering for the terminal.
    pub fn render(&self) -> String {
        let header = self.header();
        let rows = self.table();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                rows.iter()
                    .map(|r| r[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = format!("metric: {}\n", self.metric);
        for row in std::iter::once(&header).chain(&rows) {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(s, "{}", cells.join("  "));
        }
        s
    }
}

pub fn compare_runs(runs: &[RunData], metric: &str) -> Result<Comparison> {
    let first = runs
        .first()
        .ok_or_else(|| HarnessError::Mismatch("compare needs at least one run directory".into()))?;
    let reference = protocol(&first.config);
    for r in &runs[1..] {
        let p = protocol(&r.config);
        if p != reference {
            return Err(HarnessError::Mismatch(format!(
                "eval protocols differ: {} has `{reference}`, {} has `{p}`",
                first.label, r.label
            )));
        }
    }
    let known = MetricsRecord::default();
    let in_records = serde_json::to_value(&known)?.get(metric).is_some();
    let in_summary = runs.iter().any(|r| r.final_value(metric).is_some());
    if !in_records && !in_summary {
        return Err(HarnessError::Mismatch(format!("unknown metric `{metric}`")));
    }
    let iterations: BTreeSet<u64> = runs
        .iter()
        .flat_map(|r| {
            r.records
                .iter()
                .filter(|rec| rec.get(metric).is_some())
                .map(|rec| rec.iteration)
        })
        .collect();
    Ok(Comparison {
        metric: metric.to_string(),
        labels: runs.iter().map(|r| r.label.clone()).collect(),
        rows: iterations
            .into_iter()
            .map(|it| (it, runs.iter().map(|r| r.value_at(it, metric)).collect()))
            .collect(),
        final_values: runs.iter().map(|r| r.final_value(metric)).collect(),
    })
}

/// Loads `dirs`, compares `metric`, and writes the table to `out`.
pub fn compare(dirs: &[PathBuf], metric: &str, out: &Path) -> Result<Comparison> {
    let runs = dirs.iter().map(|d| RunData::load(d)).collect::<Result<Vec<_>>>()?;
    let cmp = compare_runs(&runs, metric)?;
    cmp.write_csv(out)?;
    Ok(cmp)
}
