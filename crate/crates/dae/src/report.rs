//! CSV/JSON writers for training history, evaluation reports, density
//! curves and replica studies.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use dae_core::metrics::EvalReport;
use dae_core::training::HistoryRow;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wr = csv::Writer::from_writer(BufWriter::new(file));
    let go = || -> csv::Result<()> {
        wr.write_record(header)?;
        for r in rows {
            wr.write_record(r)?;
        }
        wr.flush()?;
        Ok(())
    };
    go().map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })
}

/// `epoch,train_loss,eval_rho,mean_sigma2`; an undefined ρ is left empty.
pub fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    write_rows(
        path,
        &["epoch", "train_loss", "eval_rho", "mean_sigma2"],
        history.iter().map(|h| {
            [
                h.epoch.to_string(),
                h.train_loss.to_string(),
                opt(h.eval_rho),
                h.mean_sigma2.to_string(),
            ]
        }),
    )
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let bad = || Error::Data(format!("{}: malformed history row", path.display()));
        let f = |i: usize| row.get(i).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad());
        out.push(HistoryRow {
            epoch: row.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            train_loss: f(1)?,
            eval_rho: match row.get(2) {
                Some("") => None,
                _ => Some(f(2)?),
            },
            mean_sigma2: f(3)?,
        });
    }
    Ok(out)
}

/// Summary scalars of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rho: Option<f64>,
    pub rmse: f64,
    pub n: usize,
    pub mean_sigma2: f64,
    pub mean_sigma: f64,
}

impl From<&EvalReport> for ReportSummary {
    fn from(r: &EvalReport) -> Self {
        ReportSummary {
            rho: r.spearman_rho,
            rmse: r.rmse,
            n: r.n,
            mean_sigma2: r.mean_sigma2,
            mean_sigma: r.mean_sigma,
        }
    }
}

/// Per-record table `id,y_true,mu,sigma2,y_pred`.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    write_rows(
        path,
        &["id", "y_true", "mu", "sigma2", "y_pred"],
        report.rows.iter().map(|r| {
            [
                r.id.clone(),
                r.y_true.to_string(),
                r.mu.to_string(),
                r.sigma2.to_string(),
                r.y_pred.to_string(),
            ]
        }),
    )
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(&ReportSummary::from(report))
        .map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<ReportSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// `y,density`.
pub fn write_density(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    write_rows(
        path,
        &["y", "density"],
        curve.iter().map(|(y, d)| [y.to_string(), d.to_string()]),
    )
}

/// One replica of a variance-stability study.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaResult {
    pub replica: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub eval_rho: Option<f64>,
    pub mean_sigma2: f64,
    pub mean_sigma: f64,
}

/// Quartiles of per-replica mean σ² and mean σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilitySummary {
    pub sigma2: (f64, f64, f64),
    pub sigma: (f64, f64, f64),
}

impl StabilitySummary {
    pub fn iqr_sigma2(&self) -> f64 {
        self.sigma2.2 - self.sigma2.0
    }

    pub fn iqr_sigma(&self) -> f64 {
        self.sigma.2 - self.sigma.0
    }
}

pub const STABILITY_HEADER: [&str; 15] = [
    "row",
    "replica",
    "seed",
    "best_epoch",
    "eval_rho",
    "mean_sigma2",
    "mean_sigma",
    "q1_sigma2",
    "median_sigma2",
    "q3_sigma2",
    "iqr_sigma2",
    "q1_sigma",
    "median_sigma",
    "q3_sigma",
    "iqr_sigma",
];

/// One `replica` row per result followed by a single `summary` row.
pub fn write_stability(path: &Path, results: &[ReplicaResult], s: &StabilitySummary) -> Result<()> {
    let blank = || String::new();
    let mut rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let mut v = vec![
                "replica".to_string(),
                r.replica.to_string(),
                r.seed.to_string(),
                r.best_epoch.to_string(),
                opt(r.eval_rho),
                r.mean_sigma2.to_string(),
                r.mean_sigma.to_string(),
            ];
            v.extend(std::iter::repeat_with(blank).take(8));
            v
        })
        .collect();
    let mut summary = vec!["summary".to_string()];
    summary.extend(std::iter::repeat_with(blank).take(6));
    for (q1, med, q3) in [s.sigma2, s.sigma] {
        summary.extend([q1, med, q3, q3 - q1].map(|v| v.to_string()));
    }
    rows.push(summary);
    write_rows(path, &STABILITY_HEADER, rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
