//! Merges every `*_summary.json` below a run directory into one table keyed by
//! (model, dataset, method). Output is a pure function of the summaries, so
//! re-running produces identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use skipsponge_core::energy::ratio_increase;
use skipsponge_core::Error as CoreError;

use crate::commands::{write_json, RunSummary};
use crate::error::{io, CliError, Result};

/// Largest tolerated gap between a stored and a recomputed increase.
const RECOMPUTE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub method: String,
    pub performance_before: Option<f64>,
    pub performance_after: Option<f64>,
    pub ratio_before: f64,
    pub ratio_after: f64,
    pub ratio_increase_pct: f64,
    pub ratio_increase_recomputed: f64,
    /// Summary file, relative to the run directory.
    pub source: String,
}

fn summary_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.map(|e| e.map(|e| e.path()).map_err(|err| io(dir, err))).collect::<Result<_>>()?;
    paths.sort();
    for p in paths {
        if p.is_dir() {
            summary_files(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_summary.json")) {
            out.push(p);
        }
    }
    Ok(())
}

fn relative(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Collects and checks all rows under `run_dir`.
pub fn collect(run_dir: &Path) -> Result<Vec<ReportRow>> {
    if !run_dir.is_dir() {
        return Err(CliError::Config(format!("run directory {} does not exist", run_dir.display())));
    }
    let mut files = Vec::new();
    summary_files(run_dir, &mut files)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no *_summary.json files under {}", run_dir.display())));
    }
    let mut missing = Vec::new();
    let mut rows: BTreeMap<(String, String, String), ReportRow> = BTreeMap::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| io(f, e))?;
        let summaries: Vec<RunSummary> =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        let dir = f.parent().unwrap_or(run_dir);
        for s in summaries {
            for a in &s.artifacts {
                if !dir.join(a).exists() {
                    missing.push(relative(&dir.join(a), run_dir));
                }
            }
            let recomputed = ratio_increase(s.ratio_before, s.ratio_after)
                .map_err(|e| CliError::Numeric(format!("{}: {e}", relative(f, run_dir))))?;
            if (recomputed - s.ratio_increase_pct).abs() > RECOMPUTE_TOL {
                return Err(CliError::Numeric(format!(
                    "{}: stored ratio increase {} disagrees with recomputed {recomputed} for {}",
                    relative(f, run_dir),
                    s.ratio_increase_pct,
                    s.method
                )));
            }
            let key = (s.model.clone(), s.dataset.clone(), s.method.clone());
            let row = ReportRow {
                model: s.model,
                dataset: s.dataset,
                method: s.method,
                performance_before: s.performance_before,
                performance_after: s.performance_after,
                ratio_before: s.ratio_before,
                ratio_after: s.ratio_after,
                ratio_increase_pct: s.ratio_increase_pct,
                ratio_increase_recomputed: recomputed,
                source: relative(f, run_dir),
            };
            if let Some(prev) = rows.insert(key.clone(), row) {
                return Err(CliError::Data(format!(
                    "duplicate key {key:?} in {} and {}; give the runs distinct model names",
                    prev.source,
                    relative(f, run_dir)
                )));
            }
        }
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(CliError::Data(format!("missing artifacts: {}", missing.join(", "))));
    }
    Ok(rows.into_values().collect())
}

/// Writes `report.json` and `report.csv` into `run_dir`.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<ReportRow>> {
    let rows = collect(run_dir)?;
    write_json(&run_dir.join("report.json"), &rows)?;
    let path = run_dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(CoreError::from)?;
    for r in &rows {
        w.serialize(r).map_err(CoreError::from)?;
    }
    w.flush().map_err(|e| io(&path, e))?;
    Ok(rows)
}
