//! `metrics.jsonl` records and the summary file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of `metrics.jsonl`. Every record carries every key; values that
/// were not measured at an iteration are `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub method: String,
    /// Outer objective summed over the task batch.
    pub loss_sum: Option<f64>,
    /// `loss_sum` divided by the batch size.
    pub loss_mean: Option<f64>,
    /// Meta-learner query loss per task.
    pub meta_loss_mean: Option<f64>,
    /// Unweighted co-learner query loss per task.
    pub co_loss_mean: Option<f64>,
    pub freeze_violations: Option<usize>,
    pub cml_loss: Option<f64>,
    pub cml_loss_std: Option<f64>,
    pub cml_accuracy: Option<f64>,
    pub dagger_loss: Option<f64>,
    pub dagger_loss_std: Option<f64>,
    pub dagger_accuracy: Option<f64>,
    /// Cosine similarity of meta-path and co-path gradients at the last
    /// feature-extractor layer.
    pub grad_similarity: Option<f64>,
    pub grad_norms: Option<BTreeMap<String, f64>>,
    pub cka: Option<BTreeMap<String, f64>>,
}

impl MetricsRecord {
    /// Numeric value of a top-level key.
    pub fn get(&self, key: &str) -> Option<f64> {
        let v = serde_json::to_value(self).ok()?;
        v.get(key)?.as_f64()
    }
}

/// Appends records, flushing after each.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: File::create(path)?,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mean and population standard deviation over test tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub loss: Option<Stat>,
    pub accuracy: Option<Stat>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub feature_extractor: usize,
    pub meta_head: usize,
    pub co_head: usize,
    pub total: usize,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub family: String,
    pub k_shot: usize,
    pub seed: u64,
    /// `completed` or `diverged`.
    pub status: String,
    pub iterations: u64,
    pub diverged_at: Option<u64>,
    pub test_tasks: usize,
    /// Test metrics of the final parameters.
    pub cml: ModeSummary,
    pub dagger: ModeSummary,
    /// Meta-learner query loss per task at the last iteration.
    pub final_train_loss: Option<f64>,
    /// Mean of `meta_loss_mean` over the last 100 iterations.
    pub tail_train_loss: Option<f64>,
    /// Mean of `grad_similarity` over all diagnostic points.
    pub mean_grad_similarity: Option<f64>,
    pub param_counts: ParamCounts,
    pub wall_time_seconds: f64,
}

impl Summary {
    /// Flat numeric view used by `compare` and `sweep`.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (prefix, mode) in [("cml", &self.cml), ("dagger", &self.dagger)] {
            if let Some(s) = mode.loss {
                out.insert(format!("{prefix}_loss"), s.mean);
                out.insert(format!("{prefix}_loss_std"), s.std);
            }
            if let Some(s) = mode.accuracy {
                out.insert(format!("{prefix}_accuracy"), s.mean);
                out.insert(format!("{prefix}_accuracy_std"), s.std);
            }
        }
        let optional = [
            ("final_train_loss", self.final_train_loss),
            ("tail_train_loss", self.tail_train_loss),
            ("mean_grad_similarity", self.mean_grad_similarity),
        ];
        for (k, v) in optional {
            if let Some(v) = v {
                out.insert(k.into(), v);
            }
        }
        out.insert("iterations".into(), self.iterations as f64);
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_record_has_the_same_keys() {
        let a = serde_json::to_value(MetricsRecord::default()).unwrap();
        let b = serde_json::to_value(MetricsRecord {
            cml_loss: Some(1.0),
            grad_norms: Some(BTreeMap::from([("fe.0.w".into(), 2.0)])),
            ..Default::default()
        })
        .unwrap();
        let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
        assert_eq!(keys(&a), keys(&b));
        assert_eq!(keys(&a).len(), 16);
    }

    #[test]
    fn write_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        let r = MetricsRecord {
            iteration: 3,
            method: "cml".into(),
            loss_sum: Some(0.25),
            ..Default::default()
        };
        w.write(&r).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![r.clone()]);
        assert_eq!(r.get("loss_sum"), Some(0.25));
        assert_eq!(r.get("cml_loss"), None);
    }
}
