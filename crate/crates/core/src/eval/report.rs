//! Summary, table, and series files built from a results directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_json, RunResult, StabilityReport};
use crate::error::{Error, Result};

/// Row order of the accuracy table.
pub const STRATEGY_ORDER: [&str; 6] = ["none", "correction", "weighting", "reordering", "selection", "rectification"];

fn strategy_rank(name: &str) -> usize {
    STRATEGY_ORDER.iter().position(|s| *s == name).unwrap_or(STRATEGY_ORDER.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub rate: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub rectification_accuracy: Option<f64>,
}

/// Stability aggregated across noise rates for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityAverage {
    pub strategy: String,
    pub rates: Vec<f64>,
    pub mean: f64,
    /// Arithmetic mean of the per-rate standard deviations.
    pub averaged_std: f64,
    /// Square root of the degrees-of-freedom weighted mean variance.
    pub pooled_std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub stability: Vec<StabilityReport>,
    pub stability_averages: Vec<StabilityAverage>,
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.retain(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        name.ends_with(".json") && !name.ends_with(".partial.json")
    });
    paths.sort();
    Ok(paths)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Collects every stored run and stability report under `dir`, checking
/// each run's accuracy against its records.
pub fn collect_report(dir: &Path) -> Result<Report> {
    let mut runs = Vec::new();
    for path in read_dir_sorted(&dir.join("runs"))? {
        let run: RunResult = read_json(&path)?;
        run.verify()?;
        runs.push(RunSummary {
            strategy: run.strategy_name().to_string(),
            rate: run.rate,
            seed: run.seed,
            accuracy: run.accuracy,
            correct: run.correct,
            total: run.total,
            rectification_accuracy: run.rectification_accuracy,
        });
    }
    runs.sort_by(|a, b| {
        strategy_rank(&a.strategy)
            .cmp(&strategy_rank(&b.strategy))
            .then(a.strategy.cmp(&b.strategy))
            .then(a.rate.total_cmp(&b.rate))
    });

    let mut stability: Vec<StabilityReport> = read_dir_sorted(&dir.join("stability"))?
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_>>()?;
    stability.sort_by(|a, b| {
        strategy_rank(&a.strategy)
            .cmp(&strategy_rank(&b.strategy))
            .then(a.strategy.cmp(&b.strategy))
            .then(a.rate.total_cmp(&b.rate))
    });

    let mut groups: BTreeMap<(usize, String), Vec<&StabilityReport>> = BTreeMap::new();
    for s in &stability {
        groups
            .entry((strategy_rank(&s.strategy), s.strategy.clone()))
            .or_default()
            .push(s);
    }
    let stability_averages = groups
        .into_iter()
        .map(|((_, strategy), reports)| {
            let k = reports.len() as f64;
            let dof: f64 = reports.iter().map(|r| r.accuracies.len() as f64 - 1.0).sum();
            let pooled_var: f64 = reports
                .iter()
                .map(|r| (r.accuracies.len() as f64 - 1.0) * r.std * r.std)
                .sum::<f64>()
                / dof;
            StabilityAverage {
                strategy,
                rates: reports.iter().map(|r| r.rate).collect(),
                mean: reports.iter().map(|r| r.mean).sum::<f64>() / k,
                averaged_std: reports.iter().map(|r| r.std).sum::<f64>() / k,
                pooled_std: pooled_var.sqrt(),
            }
        })
        .collect();

    Ok(Report {
        runs,
        stability,
        stability_averages,
    })
}

/// Strategy-by-rate accuracy table; one row per strategy, one column per rate.
pub fn accuracy_table(report: &Report) -> String {
    let mut rates: Vec<f64> = report.runs.iter().map(|r| r.rate).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut out = String::from("method");
    for r in &rates {
        write!(out, ",{r}").expect("write to string");
    }
    out.push('\n');
    let mut strategies: Vec<&str> = report.runs.iter().map(|r| r.strategy.as_str()).collect();
    strategies.dedup();
    for s in strategies {
        out.push_str(s);
        for rate in &rates {
            out.push(',');
            if let Some(run) = report.runs.iter().find(|r| r.strategy == s && r.rate == *rate) {
                write!(out, "{:.4}", run.accuracy).expect("write to string");
            }
        }
        out.push('\n');
    }
    out
}

fn series_csv(report: &Report, strategy: &str) -> String {
    let mut out = String::from("rate,accuracy,mean,std\n");
    let mut rates: Vec<f64> = report
        .runs
        .iter()
        .filter(|r| r.strategy == strategy)
        .map(|r| r.rate)
        .chain(report.stability.iter().filter(|s| s.strategy == strategy).map(|s| s.rate))
        .collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    for rate in rates {
        let acc = report
            .runs
            .iter()
            .find(|r| r.strategy == strategy && r.rate == rate)
            .map(|r| format!("{:.6}", r.accuracy))
            .unwrap_or_default();
        let (mean, std) = report
            .stability
            .iter()
            .find(|s| s.strategy == strategy && s.rate == rate)
            .map(|s| (format!("{:.6}", s.mean), format!("{:.6}", s.std)))
            .unwrap_or_default();
        writeln!(out, "{rate},{acc},{mean},{std}").expect("write to string");
    }
    out
}

fn stability_csv(report: &Report) -> String {
    let mut out = String::from("method,rate,mean,std\n");
    for s in &report.stability {
        writeln!(out, "{},{},{:.6},{:.6}", s.strategy, s.rate, s.mean, s.std).expect("write to string");
    }
    for a in &report.stability_averages {
        writeln!(out, "{},average,{:.6},{:.6}", a.strategy, a.mean, a.averaged_std).expect("write to string");
        writeln!(out, "{},pooled,{:.6},{:.6}", a.strategy, a.mean, a.pooled_std).expect("write to string");
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report/summary.json`, `report/table.csv`, `report/stability.csv`
/// and `report/series/<strategy>.csv` under `dir`.
pub fn emit_report(dir: &Path) -> Result<Report> {
    let report = collect_report(dir)?;
    let out = dir.join("report");
    let series = out.join("series");
    if series.is_dir() {
        std::fs::remove_dir_all(&series).map_err(|e| Error::io(&series, e))?;
    }
    std::fs::create_dir_all(&series).map_err(|e| Error::io(&series, e))?;
    write_json(&out.join("summary.json"), &report)?;
    write_text(&out.join("table.csv"), &accuracy_table(&report))?;
    write_text(&out.join("stability.csv"), &stability_csv(&report))?;
    let mut names: Vec<&str> = report
        .runs
        .iter()
        .map(|r| r.strategy.as_str())
        .chain(report.stability.iter().map(|s| s.strategy.as_str()))
        .collect();
    names.sort();
    names.dedup();
    for name in names {
        write_text(&series.join(format!("{name}.csv")), &series_csv(&report, name))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{write_run, write_stability, CorruptionMode, QueryRecord};
    use crate::strategies::Strategy;

    fn run(strategy: Strategy, rate: f64, hits: &[bool]) -> RunResult {
        let records: Vec<QueryRecord> = hits
            .iter()
            .enumerate()
            .map(|(i, &hit)| QueryRecord {
                query_id: format!("q{i}"),
                retrieved_ids: vec![],
                retrieved_labels: vec![],
                demo_ids: vec![],
                demo_labels: vec![],
                demo_gold_labels: vec![],
                rectifier_fallbacks: vec![],
                candidate_scores: vec![0.0, -1.0],
                predicted: if hit { 0 } else { 1 },
                gold: 0,
            })
            .collect();
        let correct = hits.iter().filter(|h| **h).count();
        RunResult {
            task: "tweet".into(),
            strategy,
            rate,
            seed: 0,
            mode: CorruptionMode::RetrievalSet,
            n: 0,
            config_hash: "x".into(),
            accuracy: correct as f64 / hits.len() as f64,
            correct,
            total: hits.len(),
            rectification_accuracy: None,
            records,
        }
    }

    #[test]
    fn empty_directory_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let report = emit_report(dir.path()).unwrap();
        assert_eq!(report, Report::default());
        assert_eq!(
            std::fs::read_to_string(dir.path().join("report/table.csv")).unwrap(),
            "method\n"
        );
    }

    #[test]
    fn table_layout_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &run(Strategy::Correction, 0.0, &[true, true])).unwrap();
        write_run(dir.path(), &run(Strategy::None, 0.5, &[true, false])).unwrap();
        write_run(dir.path(), &run(Strategy::None, 0.0, &[true, true, true, false])).unwrap();
        write_stability(
            dir.path(),
            &StabilityReport::from_accuracies("none", 0.5, vec![0, 1, 2], vec![1.0, 2.0, 3.0]).unwrap(),
        )
        .unwrap();
        emit_report(dir.path()).unwrap();
        let table = std::fs::read_to_string(dir.path().join("report/table.csv")).unwrap();
        assert_eq!(table, "method,0,0.5\nnone,0.7500,0.5000\ncorrection,1.0000,\n");
        let series = std::fs::read_to_string(dir.path().join("report/series/none.csv")).unwrap();
        assert_eq!(series, "rate,accuracy,mean,std\n0,0.750000,,\n0.5,0.500000,2.000000,1.000000\n");

        let snapshot = |d: &Path| {
            ["summary.json", "table.csv", "stability.csv", "series/none.csv", "series/correction.csv"]
                .map(|f| std::fs::read(d.join("report").join(f)).unwrap())
        };
        let first = snapshot(dir.path());
        emit_report(dir.path()).unwrap();
        assert_eq!(first, snapshot(dir.path()));
    }

    #[test]
    fn mismatched_aggregate_is_an_assertion() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = run(Strategy::None, 0.1, &[true, false]);
        bad.accuracy = 1.0;
        write_run(dir.path(), &bad).unwrap();
        assert!(matches!(emit_report(dir.path()), Err(Error::Assertion(_))));
    }

    #[test]
    fn averaged_and_pooled_std() {
        let dir = tempfile::tempdir().unwrap();
        for (rate, accs) in [(0.1, vec![1.0, 3.0]), (0.2, vec![2.0, 2.0, 2.0])] {
            let seeds = (0..accs.len() as u64).collect();
            write_stability(dir.path(), &StabilityReport::from_accuracies("none", rate, seeds, accs).unwrap()).unwrap();
        }
        let report = emit_report(dir.path()).unwrap();
        let avg = &report.stability_averages[0];
        let s1 = 2f64.sqrt();
        assert!((avg.averaged_std - s1 / 2.0).abs() < 1e-12);
        assert!((avg.pooled_std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
