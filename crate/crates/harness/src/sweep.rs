//! The `sweep` command: one run per value of a single config key.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::Summary;
use crate::run::run;

#[derive(Clone, Debug)]
pub struct SweepEntry {
    pub value: String,
    pub dir: PathBuf,
    /// `None` when the run diverged before writing a summary.
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: String,
    pub entries: Vec<SweepEntry>,
    /// Path of the combined table.
    pub table: PathBuf,
}

impl SweepResult {
    pub fn any_diverged(&self) -> bool {
        self.entries.iter().any(|e| e.error.is_some())
    }

    fn columns(&self) -> Vec<String> {
        let keys: BTreeSet<String> = self
            .entries
            .iter()
            .filter_map(|e| e.summary.as_ref())
            .flat_map(|s| s.flat().into_keys())
            .collect();
        keys.into_iter().collect()
    }

    pub fn rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let cols = self.columns();
        let mut header = vec![self.axis.clone(), "status".into(), "run".into()];
        header.extend(cols.iter().cloned());
        let rows = self
            .entries
            .iter()
            .map(|e| {
                let flat = e.summary.as_ref().map(Summary::flat).unwrap_or_default();
                let status = e
                    .summary
                    .as_ref()
                    .map(|s| s.status.clone())
                    .unwrap_or_else(|| "failed".into());
                let mut row = vec![e.value.clone(), status, e.dir.display().to_string()];
                row.extend(
                    cols.iter()
                        .map(|c| flat.get(c).map(|v| v.to_string()).unwrap_or_default()),
                );
                row
            })
            .collect();
        (header, rows)
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs `base` once per entry of `values`, in order, with `axis` replaced.
/// A diverged run is recorded in the table and the sweep continues.
pub fn sweep(base: &RunConfig, axis: &str, values: &[String]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let resolved = base.clone().resolve()?;
    let stem = resolved.output.name.clone().unwrap_or_else(|| "run".into());
    let tag = sanitize(axis.rsplit('.').next().unwrap_or(axis));
    // Validate every value before the first run starts.
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.with_value(axis, v)?;
            c.output.name = Some(format!("{stem}-{tag}-{}", sanitize(v.trim())));
            c.clone().resolve()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(configs) {
        let dir = cfg.clone().resolve()?.run_dir();
        let (summary, error) = match run(cfg) {
            Ok(outcome) => (Some(outcome.summary), None),
            Err(e @ HarnessError::Divergence { .. }) => {
                let summary = Summary::load(&dir.join("summary.json")).ok();
                (summary, Some(e.to_string()))
            }
            Err(e) => return Err(e),
        };
        entries.push(SweepEntry {
            value: value.trim().to_string(),
            dir,
            summary,
            error,
        });
    }
    let root = PathBuf::from(resolved.output.root.as_deref().unwrap_or("runs"));
    let table = root.join(format!("{stem}-sweep-{tag}.csv"));
    let result = SweepResult {
        axis: axis.to_string(),
        entries,
        table,
    };
    write_table(&result, &result.table)?;
    Ok(result)
}

fn write_table(result: &SweepResult, path: &Path) -> Result<()> {
    let (header, rows) = result.rows();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
