//! Across-seed summaries and method comparison tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::runner::RunTiming;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
                values,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }

    /// `mean±std` with two decimals.
    pub fn pm(&self) -> String {
        format!("{:.2}±{:.2}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub std_acc: MetricSummary,
    pub fgsm_acc: MetricSummary,
    pub pgd_acc: MetricSummary,
    pub local_linearity: MetricSummary,
    pub co_detected: usize,
    pub pgd_label: String,
}

impl Summary {
    pub fn to_markdown(&self) -> String {
        format!(
            "| Run | Method | Standard | {} | FGSM | Local linearity | CO detected |\n\
             |---|---|---|---|---|---|---|\n\
             | {} | {} | {} | {} | {} | {} | {}/{} |\n",
            self.pgd_label,
            self.name,
            self.method,
            self.std_acc.pm(),
            self.pgd_acc.pm(),
            self.fgsm_acc.pm(),
            self.local_linearity.pm(),
            self.co_detected,
            self.seeds.len()
        )
    }
}

pub struct CompletedRun {
    pub dir: PathBuf,
    pub summary: Summary,
    pub timing: RunTiming,
}

pub fn load_run(dir: &Path) -> Result<CompletedRun> {
    let read = |file: &str| -> Result<String> {
        let path = dir.join(file);
        fs::read_to_string(&path).with_context(|| format!("missing run artifact {}", path.display()))
    };
    let summary: Summary = serde_json::from_str(&read("summary.json")?)
        .with_context(|| format!("malformed summary.json in {}", dir.display()))?;
    let timing: RunTiming = serde_json::from_str(&read("timing.json")?)
        .with_context(|| format!("malformed timing.json in {}", dir.display()))?;
    Ok(CompletedRun {
        dir: dir.to_path_buf(),
        summary,
        timing,
    })
}

/// Markdown table, one row per run; time is relative to the first
/// standard-training run (`n/a` when none is given).
pub fn compare_table(runs: &[CompletedRun]) -> String {
    let anchor = runs
        .iter()
        .find(|r| r.summary.method == "standard")
        .map(|r| r.timing.mean_train_seconds_per_epoch);
    let pgd_label = runs
        .first()
        .map(|r| r.summary.pgd_label.clone())
        .unwrap_or_else(|| "PGD".into());
    let mut out = format!("| Method | Run | Standard | {pgd_label} | FGSM | Time |\n|---|---|---|---|---|---|\n");
    for r in runs {
        let time = match anchor {
            Some(a) if a > 0.0 => format!("{:.2}", r.timing.mean_train_seconds_per_epoch / a),
            _ => "n/a".into(),
        };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.summary.method,
            r.summary.name,
            r.summary.std_acc.pm(),
            r.summary.pgd_acc.pm(),
            r.summary.fgsm_acc.pm(),
            time
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(method: &str, secs: f64) -> CompletedRun {
        let m = MetricSummary::from_values(vec![50.0, 52.0]);
        CompletedRun {
            dir: PathBuf::new(),
            summary: Summary {
                name: format!("{method}-run"),
                method: method.into(),
                seeds: vec![0, 1],
                std_acc: m.clone(),
                fgsm_acc: m.clone(),
                pgd_acc: m.clone(),
                local_linearity: m,
                co_detected: 0,
                pgd_label: "PGD-50-10".into(),
            },
            timing: RunTiming {
                name: format!("{method}-run"),
                method: method.into(),
                mean_train_seconds_per_epoch: secs,
                seeds: vec![],
            },
        }
    }

    #[test]
    fn constant_metric_has_zero_spread() {
        let m = MetricSummary::from_values(vec![42.5; 5]);
        assert_eq!(m.std, 0.0);
        assert_eq!(m.pm(), "42.50±0.00");
        assert_eq!(MetricSummary::from_values(vec![7.0]).std, 0.0);
    }

    #[test]
    fn standard_row_anchors_time() {
        let table = compare_table(&[run("standard", 2.0), run("fgsm+noiseaug", 4.5)]);
        let rows: Vec<&str> = table.lines().collect();
        assert_eq!(rows.len(), 4);
        assert!(rows[2].ends_with("| 1.00 |"));
        assert!(rows[3].ends_with("| 2.25 |"));
        assert!(rows[2].contains("51.00±1.41"));
    }

    #[test]
    fn single_run_gives_one_row() {
        let table = compare_table(&[run("fgsm", 3.0)]);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().last().unwrap().ends_with("| n/a |"));
    }
}
