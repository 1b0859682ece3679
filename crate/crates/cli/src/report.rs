//! Reports, CSV tables and the cross-report summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub method: String,
    pub metric: String,
    pub value: f64,
}

impl Metric {
    pub fn new(method: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self {
            method: method.into(),
            metric: metric.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Vec<Metric>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub stderr: f64,
}

/// A rectangular table written verbatim as CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: ToString>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(|c| c.to_string()).collect();
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| HarnessError::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config_path: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: Vec<Aggregate>,
    pub wall_clock_seconds: f64,
    /// Named wall-clock measurements in seconds.
    pub timings: BTreeMap<String, f64>,
    pub counters: BTreeMap<String, u64>,
}

/// Mean, sample standard deviation and standard error.
pub fn mean_std(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0, 0.0);
    }
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, std, std / n.sqrt())
}

/// Groups by (method, metric) in order of first appearance.
pub fn aggregate<'a>(results: impl IntoIterator<Item = &'a SeedResult>) -> Vec<Aggregate> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in results {
        for m in &r.metrics {
            let key = (m.method.clone(), m.metric.clone());
            let slot = values.entry(key.clone()).or_default();
            if slot.is_empty() {
                order.push(key);
            }
            slot.push(m.value);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let xs = &values[&key];
            let (mean, std, stderr) = mean_std(xs);
            Aggregate {
                method: key.0,
                metric: key.1,
                n: xs.len(),
                mean,
                std,
                stderr,
            }
        })
        .collect()
}

/// Long-format metrics, one row per (seed, method, metric).
pub fn metrics_table(results: &[SeedResult]) -> Table {
    let mut t = Table::new(["seed", "method", "metric", "value"]);
    for r in results {
        for m in &r.metrics {
            t.push([r.seed.to_string(), m.method.clone(), m.metric.clone(), m.value.to_string()]);
        }
    }
    t
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Validation(vec![format!("{}: {e}", path.display())]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<Aggregate>,
}

impl Summary {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["method", "metric", "n", "mean", "std"]);
        for a in &self.rows {
            t.push([a.method.clone(), a.metric.clone(), a.n.to_string(), a.mean.to_string(), a.std.to_string()]);
        }
        t
    }

    pub fn text(&self) -> String {
        let width = self.rows.iter().map(|a| a.method.len() + a.metric.len() + 1).max().unwrap_or(0);
        let mut out = format!(
            "{} over seeds {:?} (config {})\n",
            self.command,
            self.seeds,
            &self.config_hash[..self.config_hash.len().min(12)]
        );
        for a in &self.rows {
            let name = format!("{}/{}", a.method, a.metric);
            let _ = writeln!(out, "  {name:<width$}  {:>12.6} ± {:<10.6} (n={})", a.mean, a.std, a.n);
        }
        out
    }
}

/// Combines reports of one command and config into mean ± std per (method, metric).
pub fn summarize(paths: &[PathBuf]) -> Result<Summary> {
    if paths.is_empty() {
        return Err(HarnessError::Validation(vec!["summarize needs at least one report file".into()]));
    }
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        if !p.exists() {
            return Err(HarnessError::Validation(vec![format!("{}: report file not found", p.display())]));
        }
        reports.push((p, read_report(p)?));
    }
    let (first_path, first) = &reports[0];
    let mut seen = BTreeMap::new();
    let mut results = Vec::new();
    for (p, r) in &reports {
        if r.config_hash != first.config_hash {
            return Err(HarnessError::Validation(vec![format!(
                "{} has config hash {} but {} has {}; refusing to mix configs",
                p.display(),
                r.config_hash,
                first_path.display(),
                first.config_hash
            )]));
        }
        if r.command != first.command {
            return Err(HarnessError::Validation(vec![format!(
                "{} is a '{}' report but {} is '{}'",
                p.display(),
                r.command,
                first_path.display(),
                first.command
            )]));
        }
        for s in &r.per_seed {
            if let Some(other) = seen.insert(s.seed, p.display().to_string()) {
                return Err(HarnessError::Validation(vec![format!(
                    "seed {} appears in both {other} and {}",
                    s.seed,
                    p.display()
                )]));
            }
            results.push(s.clone());
        }
    }
    results.sort_by_key(|r| r.seed);
    Ok(Summary {
        command: first.command.clone(),
        config_hash: first.config_hash.clone(),
        seeds: results.iter().map(|r| r.seed).collect(),
        rows: aggregate(&results),
    })
}
