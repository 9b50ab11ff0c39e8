use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::atomic_write;

pub const REPORT_FILE: &str = "report.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

/// One per-dataset metric value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset_id: usize,
    pub seed: u64,
    pub kind: String,
    pub n_obs: usize,
    pub metric: String,
    pub value: f64,
}

/// Summary of one `(kind, n_obs, metric)` group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub kind: String,
    pub n_obs: usize,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub q10: f64,
    pub q90: f64,
    pub mean: f64,
    pub sem: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(kind: &str, n_obs: usize, metric: &str, values: &[f64]) -> Aggregate {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
    } else {
        0.0
    };
    Aggregate {
        kind: kind.to_string(),
        n_obs,
        metric: metric.to_string(),
        count: n,
        median: quantile(&sorted, 0.5),
        q10: quantile(&sorted, 0.1),
        q90: quantile(&sorted, 0.9),
        mean,
        sem,
    }
}

impl EvalReport {
    /// Values of one group, in row order.
    pub fn values(&self, kind: &str, n_obs: usize, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind && r.n_obs == n_obs && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn aggregate(&self, kind: &str, n_obs: usize, metric: &str) -> Option<Aggregate> {
        let v = self.values(kind, n_obs, metric);
        (!v.is_empty()).then(|| summarize(kind, n_obs, metric, &v))
    }

    /// Aggregates of every group, in order of first appearance.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: IndexMap<(&str, usize, &str), Vec<f64>> = IndexMap::new();
        for r in &self.rows {
            groups.entry((&r.kind, r.n_obs, &r.metric)).or_default().push(r.value);
        }
        groups
            .iter()
            .map(|(&(k, n, m), v)| summarize(k, n, m, v))
            .collect()
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }
}

fn to_csv<T: Serialize>(header: &[&str], items: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for item in items {
        w.serialize(item)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

const ROW_COLUMNS: [&str; 6] = ["dataset_id", "seed", "kind", "n_obs", "metric", "value"];
const AGG_COLUMNS: [&str; 9] = ["kind", "n_obs", "metric", "count", "median", "q10", "q90", "mean", "sem"];

/// Writes `report.csv` (one row per dataset, N_obs and metric) and
/// `aggregate.csv` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    atomic_write(&dir.join(REPORT_FILE), &to_csv(&ROW_COLUMNS, &report.rows)?)?;
    atomic_write(&dir.join(AGGREGATE_FILE), &to_csv(&AGG_COLUMNS, &report.aggregates())?)
}

fn from_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(Error::Format(format!("{}: unexpected columns {found:?}", path.display())));
    }
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Reads back both files written by [`emit_report`].
pub fn read_report(dir: &Path) -> Result<(EvalReport, Vec<Aggregate>)> {
    let rows = from_csv(&dir.join(REPORT_FILE), &ROW_COLUMNS)?;
    let aggs = from_csv(&dir.join(AGGREGATE_FILE), &AGG_COLUMNS)?;
    Ok((EvalReport { rows }, aggs))
}
