//! Charts built from the artifacts of a finished run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastat_core::models::FilterDump;
use fastat_core::{RunHistory, SensitivityProfile};
use serde::de::DeserializeOwned;

use crate::svg::{color, render_filters, Chart, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    History,
    Linearity,
    Profile,
    Filters,
}

impl PlotKind {
    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::History => "history.svg",
            PlotKind::Linearity => "linearity.svg",
            PlotKind::Profile => "profile.svg",
            PlotKind::Filters => "filters.svg",
        }
    }
}

/// Seed directories of a run (`seed_*`), or `dir` itself when it already
/// holds a history.
pub fn seed_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("history.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no seed directories under {}", dir.display());
    }
    Ok(dirs)
}

fn seed_label(dir: &Path) -> String {
    dir.file_name().and_then(|n| n.to_str()).unwrap_or("run").replace('_', " ")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed {}", path.display()))
}

fn load_history(dir: &Path) -> Result<RunHistory> {
    let path = dir.join("history.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(RunHistory::from_csv(&text)?)
}

fn points(h: &RunHistory, f: impl Fn(&fastat_core::EpochRecord) -> f64) -> Vec<(f64, f64)> {
    h.records.iter().map(|r| (r.epoch as f64, f(r))).collect()
}

/// Clean accuracy (dashed) and PGD accuracy (solid) per epoch, one colour
/// per seed.
pub fn history_chart(dirs: &[PathBuf]) -> Result<Chart> {
    let mut series = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let h = load_history(dir)?;
        let label = seed_label(dir);
        series.push(Series {
            label: format!("{label} clean"),
            points: points(&h, |r| r.std_acc),
            dashed: true,
            color: color(i).into(),
        });
        series.push(Series {
            label: format!("{label} PGD"),
            points: points(&h, |r| r.pgd_acc),
            dashed: false,
            color: color(i).into(),
        });
    }
    Ok(Chart {
        title: "Accuracy during training".into(),
        x_label: "epoch".into(),
        y_label: "accuracy (%)".into(),
        series,
        y_range: Some((0.0, 100.0)),
        x_ticks: None,
    })
}

pub fn linearity_chart(dirs: &[PathBuf]) -> Result<Chart> {
    let mut series = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let h = load_history(dir)?;
        series.push(Series {
            label: seed_label(dir),
            points: points(&h, |r| r.local_linearity),
            dashed: false,
            color: color(i).into(),
        });
    }
    Ok(Chart {
        title: "Local linearity".into(),
        x_label: "epoch".into(),
        y_label: "gradient cosine".into(),
        series,
        y_range: Some((-1.0, 1.0)),
        x_ticks: None,
    })
}

pub fn profile_chart(dirs: &[PathBuf]) -> Result<Chart> {
    let mut series = Vec::new();
    let mut ticks = None;
    for (i, dir) in dirs.iter().enumerate() {
        let p: SensitivityProfile = read_json(&dir.join("profile.json"))?;
        let label = seed_label(dir);
        let idx = |v: &[f64]| v.iter().enumerate().map(|(k, &c)| (k as f64, c)).collect::<Vec<_>>();
        series.push(Series {
            label: format!("{label} forward"),
            points: idx(&p.forward_cos),
            dashed: true,
            color: color(i).into(),
        });
        series.push(Series {
            label: format!("{label} backward"),
            points: idx(&p.backward_cos),
            dashed: false,
            color: color(i).into(),
        });
        ticks.get_or_insert(p.layers);
    }
    Ok(Chart {
        title: "Noise sensitivity by layer".into(),
        x_label: "layer".into(),
        y_label: "cosine".into(),
        series,
        y_range: Some((-1.0, 1.0)),
        x_ticks: ticks,
    })
}

/// Renders `kind` for the run or seed directory `input`.
pub fn render(kind: PlotKind, input: &Path) -> Result<String> {
    let dirs = seed_dirs(input)?;
    Ok(match kind {
        PlotKind::History => history_chart(&dirs)?.render(),
        PlotKind::Linearity => linearity_chart(&dirs)?.render(),
        PlotKind::Profile => profile_chart(&dirs)?.render(),
        PlotKind::Filters => {
            let filters: Vec<FilterDump> = read_json(&dirs[0].join("filters.json"))?;
            render_filters(&filters, 10.0)
        }
    })
}
