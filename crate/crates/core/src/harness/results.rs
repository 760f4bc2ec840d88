use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const RESULT_HEADER: [&str; 8] = ["run_id", "seed", "method", "gamma", "eta", "family", "metric", "value"];

/// One long-format result cell. `gamma`, `eta` and `family` are empty when
/// they do not apply to the metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
    pub family: Option<String>,
    pub metric: String,
    pub value: f64,
}

fn opt_cmp(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    }
}

impl ResultRow {
    fn sort_cmp(&self, other: &Self) -> Ordering {
        self.run_id
            .cmp(&other.run_id)
            .then(self.seed.cmp(&other.seed))
            .then(self.method.cmp(&other.method))
            .then(opt_cmp(self.gamma, other.gamma))
            .then(opt_cmp(self.eta, other.eta))
            .then(self.family.cmp(&other.family))
            .then(self.metric.cmp(&other.metric))
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| a.sort_cmp(b));
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Sorts canonically and writes the results table.
pub fn write_results<W: Write>(rows: &mut [ResultRow], out: W) -> Result<()> {
    sort_rows(rows);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_HEADER)?;
    for r in rows.iter() {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.method.clone(),
            fmt_opt(r.gamma),
            fmt_opt(r.eta),
            r.family.clone().unwrap_or_default(),
            r.metric.clone(),
            r.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A failed sweep cell, written to the error-log sidecar.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ErrorEntry {
    pub seed: u64,
    pub method: String,
    pub cell: String,
    pub message: String,
}

pub fn write_error_log<W: Write>(entries: &mut [ErrorEntry], mut out: W) -> Result<()> {
    entries.sort();
    for e in entries.iter() {
        writeln!(out, "seed={} method={} cell={} error={}", e.seed, e.method, e.cell, e.message)?;
    }
    Ok(())
}
