//! Report files.
//!
//! * `runs.csv`: `mode,k,seed,accuracy,auc,n_failures,n_total`, one row per run.
//! * `aggregate.csv`: `mode,k,n_runs,accuracy_mean,accuracy_std,auc_mean,auc_std,n_failures`.
//! * `curves.csv`: one row per k with `<mode>_accuracy` and `<mode>_auc`
//!   columns holding the cross-seed means, ready for plotting.
//! * `report.json`: config snapshot, pool digests, runs, aggregates and
//!   per-subject outcomes.
//!
//! Numbers are written with six decimals; unavailable values are `NA`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{EvalReport, HarnessError};
use crate::metrics::MeanStd;
use crate::prompt::Mode;

pub const NA: &str = "NA";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub runs: PathBuf,
    pub aggregate: PathBuf,
    pub curves: PathBuf,
    pub report: PathBuf,
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:.6}"))
}

fn csv_text(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn runs_csv(report: &EvalReport) -> String {
    let header = ["mode", "k", "seed", "accuracy", "auc", "n_failures", "n_total"].map(String::from);
    let rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                r.k.to_string(),
                r.seed.to_string(),
                num(r.accuracy),
                num(r.auc),
                r.n_failures.to_string(),
                r.n_total.to_string(),
            ]
        })
        .collect();
    csv_text(&header, &rows)
}

pub fn aggregate_csv(report: &EvalReport) -> String {
    let header =
        ["mode", "k", "n_runs", "accuracy_mean", "accuracy_std", "auc_mean", "auc_std", "n_failures"].map(String::from);
    let mean = |m: Option<MeanStd>| num(m.map(|m| m.mean));
    let std = |m: Option<MeanStd>| num(m.map(|m| m.std));
    let rows: Vec<Vec<String>> = report
        .aggregates
        .iter()
        .map(|a| {
            vec![
                a.mode.to_string(),
                a.k.to_string(),
                a.n_runs.to_string(),
                mean(a.accuracy),
                std(a.accuracy),
                mean(a.auc),
                std(a.auc),
                a.n_failures.to_string(),
            ]
        })
        .collect();
    csv_text(&header, &rows)
}

pub fn curves_csv(report: &EvalReport) -> String {
    let mut modes: Vec<Mode> = Vec::new();
    let mut ks: Vec<usize> = Vec::new();
    for a in &report.aggregates {
        if !modes.contains(&a.mode) {
            modes.push(a.mode);
        }
        if !ks.contains(&a.k) {
            ks.push(a.k);
        }
    }
    ks.sort_unstable();
    let mut header = vec!["k".to_string()];
    for m in &modes {
        header.push(format!("{m}_accuracy"));
        header.push(format!("{m}_auc"));
    }
    let rows: Vec<Vec<String>> = ks
        .iter()
        .map(|&k| {
            let mut row = vec![k.to_string()];
            for &m in &modes {
                let agg = report.aggregates.iter().find(|a| a.mode == m && a.k == k);
                row.push(num(agg.and_then(|a| a.accuracy).map(|s| s.mean)));
                row.push(num(agg.and_then(|a| a.auc).map(|s| s.mean)));
            }
            row
        })
        .collect();
    csv_text(&header, &rows)
}

fn write(path: &Path, body: &str) -> Result<(), HarnessError> {
    fs::write(path, body).map_err(|source| HarnessError::Output { path: path.to_path_buf(), source })
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|source| HarnessError::Output { path: dir.to_path_buf(), source })
}

fn json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn emit_reports(report: &EvalReport, dir: &Path) -> Result<ReportFiles, HarnessError> {
    ensure_dir(dir)?;
    let files = ReportFiles {
        runs: dir.join("runs.csv"),
        aggregate: dir.join("aggregate.csv"),
        curves: dir.join("curves.csv"),
        report: dir.join("report.json"),
    };
    write(&files.runs, &runs_csv(report))?;
    write(&files.aggregate, &aggregate_csv(report))?;
    write(&files.curves, &curves_csv(report))?;
    write(&files.report, &json(report))?;
    Ok(files)
}

/// Writes `partial_report.json` for an aborted sweep.
pub fn write_partial(report: &EvalReport, dir: &Path) -> Result<PathBuf, HarnessError> {
    ensure_dir(dir)?;
    let path = dir.join("partial_report.json");
    write(&path, &json(report))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{SplitReport, SweepConfig};
    use crate::metrics::{aggregate, RunMetrics};
    use std::collections::BTreeMap;

    fn report() -> EvalReport {
        let config = SweepConfig::from_toml(
            "data_dir = \"d\"\nmanifest = \"m\"\nproxy_pool = \"p\"\noutput_dir = \"o\"\nmodes = [\"mmse_proxy\", \"no_proxy\"]\n",
            Path::new(""),
        )
        .unwrap();
        let run = |mode, k, seed, acc: f64, auc| RunMetrics {
            mode,
            k,
            seed,
            accuracy: Some(acc),
            auc,
            n_failures: 0,
            n_total: 6,
        };
        let runs = vec![
            run(Mode::MmseProxy, 0, 1, 0.5, Some(0.625)),
            run(Mode::MmseProxy, 0, 2, 0.5, Some(0.625)),
            run(Mode::NoProxy, 0, 1, 1.0 / 3.0, None),
            run(Mode::NoProxy, 0, 2, 1.0 / 3.0, None),
        ];
        EvalReport {
            config,
            split: SplitReport { train: 4, test: 6, counts_checked: false },
            pool_digests: BTreeMap::new(),
            aggregates: aggregate(&runs),
            runs,
            outcomes: Vec::new(),
            complete: true,
        }
    }

    #[test]
    fn runs_format() {
        let text = runs_csv(&report());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "mode,k,seed,accuracy,auc,n_failures,n_total");
        assert_eq!(lines[1], "mmse_proxy,0,1,0.500000,0.625000,0,6");
        assert_eq!(lines[3], "no_proxy,0,1,0.333333,NA,0,6");
    }

    #[test]
    fn aggregate_and_curves_format() {
        let r = report();
        let agg = aggregate_csv(&r);
        assert!(agg.lines().any(|l| l == "no_proxy,0,2,0.333333,0.000000,NA,NA,0"), "{agg}");
        let curves = curves_csv(&r);
        let lines: Vec<&str> = curves.lines().collect();
        assert_eq!(lines[0], "k,mmse_proxy_accuracy,mmse_proxy_auc,no_proxy_accuracy,no_proxy_auc");
        assert_eq!(lines[1], "0,0.500000,0.625000,0.333333,NA");
    }

    #[test]
    fn emits_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_reports(&report(), &dir.path().join("nested")).unwrap();
        for p in [&files.runs, &files.aggregate, &files.curves, &files.report] {
            assert!(p.is_file());
        }
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files.report).unwrap()).unwrap();
        assert_eq!(v["runs"].as_array().unwrap().len(), 4);
        assert_eq!(v["complete"], serde_json::json!(true));
    }
}
