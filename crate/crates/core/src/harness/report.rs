//! Run records and their CSV/JSON serialization.
//!
//! The CSV schema is fixed: `scenario,seed,stage,metric,value,verdict,artifact_path`.
//! Values are formatted with Rust's shortest round-tripping float notation and
//! the JSON mirror carries the same strings, so the two formats are loss-free
//! mirrors of each other (including non-finite anomaly indices).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "scenario,seed,stage,metric,value,verdict,artifact_path";

/// One reported measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: String,
    pub metric: String,
    pub value: f64,
    #[serde(default)]
    pub verdict: Option<String>,
    #[serde(default)]
    pub artifact: Option<String>,
}

impl MetricRow {
    pub fn new(stage: &str, metric: &str, value: f64) -> Self {
        MetricRow {
            stage: stage.into(),
            metric: metric.into(),
            value,
            verdict: None,
            artifact: None,
        }
    }

    pub fn with_verdict(mut self, verdict: impl Into<String>) -> Self {
        self.verdict = Some(verdict.into());
        self
    }

    pub fn with_artifact(mut self, artifact: impl Into<String>) -> Self {
        self.artifact = Some(artifact.into());
        self
    }
}

/// Everything one scenario execution produced for one seed (or the
/// aggregate pseudo-seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    /// Seed number, or `"aggregate"` for the mean/std row set.
    pub seed: String,
    pub config_hash: String,
    pub metrics: Vec<MetricRow>,
    pub wall_clock_s: f64,
    pub artifacts: Vec<String>,
}

impl RunRecord {
    pub fn get(&self, stage: &str, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.stage == stage && m.metric == metric)
            .map(|m| m.value)
    }

    pub fn require(&self, stage: &str, metric: &str) -> Result<f64> {
        self.get(stage, metric).ok_or_else(|| {
            Error::Contract(format!(
                "record {}:{} missing metric {stage}/{metric}",
                self.scenario, self.seed
            ))
        })
    }
}

/// Shortest representation that round-trips through f64 parsing; `inf` and
/// `NaN` spelled explicitly.
pub fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub fn parse_value(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "NaN" => Ok(f64::NAN),
        other => other
            .parse::<f64>()
            .map_err(|e| Error::Validation(format!("bad metric value '{other}': {e}"))),
    }
}

/// Flat row as it appears in the CSV, all fields stringly typed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatRow {
    pub scenario: String,
    pub seed: String,
    pub stage: String,
    pub metric: String,
    pub value: String,
    pub verdict: String,
    pub artifact_path: String,
}

pub fn flatten(records: &[RunRecord]) -> Vec<FlatRow> {
    let mut rows = Vec::new();
    for rec in records {
        for m in &rec.metrics {
            rows.push(FlatRow {
                scenario: rec.scenario.clone(),
                seed: rec.seed.clone(),
                stage: m.stage.clone(),
                metric: m.metric.clone(),
                value: fmt_value(m.value),
                verdict: m.verdict.clone().unwrap_or_default(),
                artifact_path: m.artifact.clone().unwrap_or_default(),
            });
        }
    }
    rows
}

pub fn rows_to_csv(rows: &[FlatRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        for field in [&r.scenario, &r.seed, &r.stage, &r.metric, &r.value, &r.verdict] {
            debug_assert!(!field.contains(',') && !field.contains('\n'));
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.scenario, r.seed, r.stage, r.metric, r.value, r.verdict, r.artifact_path
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<FlatRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Validation(format!(
                "bad CSV header: {other:?}, expected '{CSV_HEADER}'"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(7, ',').collect();
        if parts.len() != 7 {
            return Err(Error::Validation(format!(
                "row {} has {} fields, expected 7",
                i + 2,
                parts.len()
            )));
        }
        rows.push(FlatRow {
            scenario: parts[0].into(),
            seed: parts[1].into(),
            stage: parts[2].into(),
            metric: parts[3].into(),
            value: parts[4].into(),
            verdict: parts[5].into(),
            artifact_path: parts[6].into(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format '{other}'"))),
        }
    }
}

/// Serialize records into `report.csv` or `report.json` under `dir`;
/// returns the file path.
pub fn emit_report(
    records: &[RunRecord],
    format: ReportFormat,
    dir: &Path,
) -> Result<std::path::PathBuf> {
    if records.is_empty() {
        return Err(Error::Contract("no records to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let rows = flatten(records);
    let (name, payload) = match format {
        ReportFormat::Csv => ("report.csv", rows_to_csv(&rows)),
        ReportFormat::Json => (
            "report.json",
            serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n",
        ),
    };
    let path = dir.join(name);
    std::fs::write(&path, payload)?;
    Ok(path)
}

/// Population standard deviation (the convention aggregate rows use).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Build the aggregate pseudo-record: mean and std per (stage, metric) over
/// the per-seed records, in first-seen order. Per-model score dumps
/// (`scores_*` stages) are skipped.
pub fn aggregate(records: &[RunRecord]) -> RunRecord {
    let mut order: Vec<(String, String)> = Vec::new();
    for rec in records {
        for m in &rec.metrics {
            if m.stage.starts_with("scores_") {
                continue;
            }
            let key = (m.stage.clone(), m.metric.clone());
            if !order.contains(&key) {
                order.push(key);
            }
        }
    }
    let mut metrics = Vec::new();
    for (stage, metric) in order {
        let values: Vec<f64> = records
            .iter()
            .filter_map(|r| r.get(&stage, &metric))
            .collect();
        if values.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&values);
        metrics.push(MetricRow::new(&stage, &format!("{metric}_mean"), mean));
        metrics.push(MetricRow::new(&stage, &format!("{metric}_std"), std));
    }
    RunRecord {
        scenario: records[0].scenario.clone(),
        seed: "aggregate".into(),
        config_hash: records[0].config_hash.clone(),
        metrics,
        wall_clock_s: records.iter().map(|r| r.wall_clock_s).sum(),
        artifacts: Vec::new(),
    }
}
