//! Metric samples and their CSV/JSON export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const METRICS_CSV_HEADER: &str = "kind,value,unit,time_ms,labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    JoinLatency,
    ElectionLatency,
    QueryResponse,
    TransferResponse,
    Throughput,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::JoinLatency => "JoinLatency",
            MetricKind::ElectionLatency => "ElectionLatency",
            MetricKind::QueryResponse => "QueryResponse",
            MetricKind::TransferResponse => "TransferResponse",
            MetricKind::Throughput => "Throughput",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Ms,
    Mbps,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Ms => "ms",
            Unit::Mbps => "mbps",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: MetricKind,
    pub value: f64,
    pub unit: Unit,
    pub time_ms: f64,
    pub labels: BTreeMap<String, String>,
}

impl MetricsRecord {
    pub fn new(kind: MetricKind, value: f64, unit: Unit, time_ms: f64) -> Self {
        debug_assert!(value.is_finite() && value >= 0.0, "metric value {value}");
        MetricsRecord {
            kind,
            value,
            unit,
            time_ms,
            labels: BTreeMap::new(),
        }
    }

    pub fn label(mut self, key: &str, value: impl ToString) -> Self {
        self.labels.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    /// Picks the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => MetricsFormat::Json,
            _ => MetricsFormat::Csv,
        }
    }
}

/// Labels are written as `key=value` pairs joined by `;`.
pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let labels: Vec<String> = r.labels.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.kind.as_str(),
            r.value,
            r.unit.as_str(),
            r.time_ms,
            labels.join(";")
        );
    }
    out
}

pub fn metrics_to_json(records: &[MetricsRecord]) -> String {
    let mut s = serde_json::to_string_pretty(records).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn metrics_from_json(text: &str) -> serde_json::Result<Vec<MetricsRecord>> {
    serde_json::from_str(text)
}

pub fn export_metrics(records: &[MetricsRecord], format: MetricsFormat, path: &Path) -> io::Result<()> {
    let body = match format {
        MetricsFormat::Csv => metrics_to_csv(records),
        MetricsFormat::Json => metrics_to_json(records),
    };
    fs::write(path, body)
}
