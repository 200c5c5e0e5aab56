use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One `run_id,step,metric,value` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric log of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    run_id: String,
    rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn new(run_id: impl Into<String>) -> Self {
        MetricsReport {
            run_id: run_id.into(),
            rows: Vec::new(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn push(&mut self, step: u64, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            run_id: self.run_id.clone(),
            step,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Values of `metric` in insertion order.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

pub fn rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["run_id", "step", "metric", "value"])
            .map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("metrics CSV: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV writer emits UTF-8"))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<MetricRow>, _>>()
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("metrics CSV: {e}"))
}
