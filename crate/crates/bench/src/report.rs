use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use crate::experiment::{ResultsTable, RunRecord};
use crate::scenario::ScenarioSpec;

/// Mean and standard error of the mean; the error is 0 below two samples.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub n_targets: usize,
    pub horizon: usize,
    /// `None` pools every covariance value.
    pub covariance_r: Option<f64>,
    pub scenario: String,
    /// Runs in the cell, failed ones included.
    pub count: usize,
    pub n_failed: usize,
    pub att_mean: f64,
    pub att_stderr: f64,
    pub def_mean: f64,
    pub def_stderr: f64,
    pub runtime_mean_sec: f64,
    pub converged_fraction: f64,
}

fn aggregate_by<K: Ord>(table: &ResultsTable, key: impl Fn(&RunRecord) -> K, keep_r: bool) -> Vec<AggregateRow> {
    // Scenarios keep their first-seen order inside each key.
    let mut order: Vec<&str> = Vec::new();
    let mut cells: BTreeMap<(K, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in &table.records {
        let idx = match order.iter().position(|s| *s == r.scenario) {
            Some(i) => i,
            None => {
                order.push(&r.scenario);
                order.len() - 1
            }
        };
        cells.entry((key(r), idx)).or_default().push(r);
    }
    cells
        .into_values()
        .map(|rows| {
            let ok: Vec<&&RunRecord> = rows.iter().filter(|r| !r.failed()).collect();
            let att: Vec<f64> = ok.iter().map(|r| r.att_util_per_step).collect();
            let def: Vec<f64> = ok.iter().map(|r| r.def_util_per_step).collect();
            let (att_mean, att_stderr) = mean_stderr(&att);
            let (def_mean, def_stderr) = mean_stderr(&def);
            let first = rows[0];
            AggregateRow {
                n_targets: first.n_targets,
                horizon: first.horizon,
                covariance_r: keep_r.then_some(first.covariance_r),
                scenario: first.scenario.clone(),
                count: rows.len(),
                n_failed: rows.len() - ok.len(),
                att_mean,
                att_stderr,
                def_mean,
                def_stderr,
                runtime_mean_sec: rows.iter().map(|r| r.runtime_sec).sum::<f64>() / rows.len() as f64,
                converged_fraction: ok.iter().filter(|r| r.converged).count() as f64 / rows.len() as f64,
            }
        })
        .collect()
}

/// One row per (N, T, scenario), pooling covariance values and games.
pub fn aggregate(table: &ResultsTable) -> Vec<AggregateRow> {
    aggregate_by(table, |r| (r.n_targets, r.horizon), false)
}

/// One row per (N, T, r, scenario).
pub fn aggregate_by_r(table: &ResultsTable) -> Vec<AggregateRow> {
    aggregate_by(table, |r| (r.n_targets, r.horizon, OrdF64(r.covariance_r)), true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const RUN_HEADER: [&str; 10] = [
    "n_targets",
    "horizon",
    "covariance_r",
    "seed",
    "scenario",
    "att_util_per_step",
    "def_util_per_step",
    "runtime_sec",
    "converged",
    "error",
];

pub fn write_runs_csv(table: &ResultsTable, path: &Path) -> anyhow::Result<()> {
    write_rows(path, &RUN_HEADER, &table.records)
}

const AGG_HEADER: [&str; 12] = [
    "n_targets",
    "horizon",
    "covariance_r",
    "scenario",
    "count",
    "n_failed",
    "att_mean",
    "att_stderr",
    "def_mean",
    "def_stderr",
    "runtime_mean_sec",
    "converged_fraction",
];

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> anyhow::Result<()> {
    write_rows(path, &AGG_HEADER, rows)
}

/// Writes `runs.csv`, `aggregate.csv` and `aggregate_by_r.csv` under `dir`.
pub fn write_outputs(table: &ResultsTable, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let runs = dir.join("runs.csv");
    let agg = dir.join("aggregate.csv");
    let by_r = dir.join("aggregate_by_r.csv");
    write_runs_csv(table, &runs)?;
    write_aggregate_csv(&aggregate(table), &agg)?;
    write_aggregate_csv(&aggregate_by_r(table), &by_r)?;
    Ok(vec![runs, agg, by_r])
}

#[derive(Serialize)]
struct PanelRow<'a> {
    n_targets: usize,
    scenario: &'a str,
    mean: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct RuntimeRow {
    n_targets: usize,
    horizon: usize,
    mean_minutes: f64,
}

/// Per-figure CSVs: attacker and defender utility against target count for
/// each horizon, restricted to `scenarios`, plus planner runtime.
pub fn emit_plotdata(table: &ResultsTable, scenarios: &[ScenarioSpec], dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if table.records.is_empty() {
        bail!("no results to plot");
    }
    fs::create_dir_all(dir)?;
    let agg = aggregate(table);
    let wanted = |s: &str| scenarios.iter().any(|x| x.label == s);
    let mut horizons: Vec<usize> = table.records.iter().map(|r| r.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();

    let mut written = Vec::new();
    for &t in &horizons {
        for (name, att) in [("attacker", true), ("defender", false)] {
            let rows: Vec<PanelRow> = agg
                .iter()
                .filter(|a| a.horizon == t && wanted(&a.scenario))
                .map(|a| PanelRow {
                    n_targets: a.n_targets,
                    scenario: &a.scenario,
                    mean: if att { a.att_mean } else { a.def_mean },
                    stderr: if att { a.att_stderr } else { a.def_stderr },
                })
                .collect();
            let path = dir.join(format!("{name}_utility_T{t}.csv"));
            write_rows(&path, &["n_targets", "scenario", "mean", "stderr"], &rows)?;
            written.push(path);
        }
    }

    // Runtime of the manipulating planner only; the baseline is one LP.
    let mut runtime: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in table.records.iter().filter(|r| r.scenario != crate::scenario::NON_MANIPULATE && wanted(&r.scenario)) {
        runtime.entry((r.n_targets, r.horizon)).or_default().push(r.runtime_sec);
    }
    let rows: Vec<RuntimeRow> = runtime
        .into_iter()
        .map(|((n, t), v)| RuntimeRow {
            n_targets: n,
            horizon: t,
            mean_minutes: v.iter().sum::<f64>() / v.len() as f64 / 60.0,
        })
        .collect();
    let path = dir.join("runtime.csv");
    write_rows(&path, &["n_targets", "T", "mean_minutes"], &rows)?;
    written.push(path);
    Ok(written)
}

/// Human-readable one-line-per-cell summary of an aggregate.
pub fn summarize(rows: &[AggregateRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{:>3} {:>2} {:<16} {:>5} {:>12} {:>12} {:>9}", "N", "T", "scenario", "runs", "att/step", "def/step", "sec/run")?;
    for r in rows {
        writeln!(
            out,
            "{:>3} {:>2} {:<16} {:>5} {:>12.4} {:>12.4} {:>9.3}",
            r.n_targets, r.horizon, r.scenario, r.count, r.att_mean, r.def_mean, r.runtime_mean_sec
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize, r: f64, scenario: &str, att: f64) -> RunRecord {
        RunRecord {
            n_targets: n,
            horizon: 2,
            covariance_r: r,
            seed: 0,
            scenario: scenario.into(),
            att_util_per_step: att,
            def_util_per_step: -att,
            runtime_sec: 1.0,
            converged: true,
            error: String::new(),
        }
    }

    #[test]
    fn identical_rows_have_zero_stderr() {
        let (m, s) = mean_stderr(&[2.5; 10]);
        assert_eq!((m, s), (2.5, 0.0));
    }

    #[test]
    fn aggregate_pools_covariance_values() {
        let table = ResultsTable {
            records: vec![
                rec(4, -1.0, "QRvsQR", 1.0),
                rec(4, -1.0, "nonManipulate", 0.0),
                rec(4, 0.0, "QRvsQR", 3.0),
                rec(4, 0.0, "nonManipulate", 0.0),
            ],
        };
        let agg = aggregate(&table);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].scenario, "QRvsQR");
        assert_eq!((agg[0].count, agg[0].att_mean, agg[0].att_stderr), (2, 2.0, 1.0));
        let by_r = aggregate_by_r(&table);
        assert_eq!(by_r.len(), 4);
        assert_eq!(by_r[0].covariance_r, Some(-1.0));
        assert_eq!(by_r[3].covariance_r, Some(0.0));
    }
}
