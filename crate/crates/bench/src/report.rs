//! CSV output: raw samples, per-configuration percentiles and the
//! `(T, S)` heatmap grid of sweep C.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Sweep;
use crate::run::RunResult;
use crate::sample::Metric;
use crate::stats::PercentileReport;
use crate::BenchError;

pub const RAW_FILE: &str = "raw.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const HEATMAP_FILE: &str = "heatmap_e2e_p999.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub metric: String,
    pub mode: String,
    pub backend: String,
    #[serde(rename = "T")]
    pub topics: u32,
    #[serde(rename = "S")]
    pub subscribers: u32,
    #[serde(rename = "R")]
    pub rate_hz: f64,
    pub iter: u32,
    pub process: u32,
    pub value_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub metric: Metric,
    pub mode: String,
    pub backend: String,
    pub topics: u32,
    pub subscribers: u32,
    pub rate_hz: f64,
    pub report: PercentileReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct AggregateRecord {
    metric: String,
    mode: String,
    backend: String,
    #[serde(rename = "T")]
    topics: u32,
    #[serde(rename = "S")]
    subscribers: u32,
    #[serde(rename = "R")]
    rate_hz: f64,
    n: usize,
    p50_us: f64,
    p999_us: f64,
}

pub fn raw_rows(result: &RunResult) -> impl Iterator<Item = RawRow> + '_ {
    let c = &result.config;
    result.samples.iter().map(move |s| RawRow {
        metric: s.metric.label().to_string(),
        mode: c.mode.label().to_string(),
        backend: c.backend.label().to_string(),
        topics: s.coords.topics,
        subscribers: s.coords.subscribers,
        rate_hz: s.coords.rate_hz,
        iter: s.coords.iteration,
        process: s.coords.process,
        value_us: s.value_us(),
    })
}

type GroupKey = (Metric, String, String, u32, u32, u64);

/// Pools rows by configuration and metric and computes their percentiles.
/// Groups come out ordered by metric, mode, backend, T, S, R.
pub fn aggregate_rows(rows: impl IntoIterator<Item = RawRow>) -> Result<Vec<AggregateRow>, BenchError> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let metric = Metric::from_label(&r.metric)
            .ok_or_else(|| BenchError::InvalidConfig(format!("unknown metric {:?}", r.metric)))?;
        groups
            .entry((metric, r.mode, r.backend, r.topics, r.subscribers, r.rate_hz.to_bits()))
            .or_default()
            .push(r.value_us);
    }
    groups
        .into_iter()
        .map(|((metric, mode, backend, topics, subscribers, rate), values)| {
            Ok(AggregateRow {
                metric,
                mode,
                backend,
                topics,
                subscribers,
                rate_hz: f64::from_bits(rate),
                report: PercentileReport::pooled(&values)?,
            })
        })
        .collect()
}

pub fn aggregate(results: &[RunResult]) -> Result<Vec<AggregateRow>, BenchError> {
    aggregate_rows(results.iter().flat_map(raw_rows))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub raw: PathBuf,
    pub aggregate: PathBuf,
    pub heatmap: Option<PathBuf>,
}

/// Writes the raw, aggregate and (when sweep C results are present)
/// heatmap CSV files into `out_dir`.
pub fn emit_report(results: &[RunResult], out_dir: &Path) -> Result<ReportFiles, BenchError> {
    std::fs::create_dir_all(out_dir)?;
    let raw = out_dir.join(RAW_FILE);
    let mut w = csv::Writer::from_path(&raw)?;
    for row in results.iter().flat_map(raw_rows) {
        w.serialize(row)?;
    }
    if results.iter().all(|r| r.samples.is_empty()) {
        w.write_record(["metric", "mode", "backend", "T", "S", "R", "iter", "process", "value_us"])?;
    }
    w.flush()?;

    let rows = aggregate(results)?;
    let aggregate_path = out_dir.join(AGGREGATE_FILE);
    let mut w = csv::Writer::from_path(&aggregate_path)?;
    for a in &rows {
        w.serialize(AggregateRecord {
            metric: a.metric.label().to_string(),
            mode: a.mode.clone(),
            backend: a.backend.clone(),
            topics: a.topics,
            subscribers: a.subscribers,
            rate_hz: a.rate_hz,
            n: a.report.n,
            p50_us: a.report.p50,
            p999_us: a.report.p999,
        })?;
    }
    if rows.is_empty() {
        w.write_record(["metric", "mode", "backend", "T", "S", "R", "n", "p50_us", "p999_us"])?;
    }
    w.flush()?;

    let grid: Vec<&RunResult> = results.iter().filter(|r| r.config.sweep == Sweep::C).collect();
    let heatmap = if grid.is_empty() {
        None
    } else {
        let path = out_dir.join(HEATMAP_FILE);
        let cells = aggregate_rows(grid.iter().flat_map(|r| raw_rows(r)))?;
        write_heatmap(&cells, &path)?;
        Some(path)
    };
    Ok(ReportFiles {
        raw,
        aggregate: aggregate_path,
        heatmap,
    })
}

/// One row per (mode, backend, T), one column per S, cells hold E2E
/// p99.9 in microseconds; missing cells are empty.
fn write_heatmap(cells: &[AggregateRow], path: &Path) -> Result<(), BenchError> {
    let e2e: Vec<&AggregateRow> = cells.iter().filter(|a| a.metric == Metric::E2e).collect();
    let mut ss: Vec<u32> = e2e.iter().map(|a| a.subscribers).collect();
    ss.sort_unstable();
    ss.dedup();
    let mut rows: BTreeMap<(String, String, u32), BTreeMap<u32, f64>> = BTreeMap::new();
    for a in &e2e {
        rows.entry((a.mode.clone(), a.backend.clone(), a.topics))
            .or_default()
            .insert(a.subscribers, a.report.p999);
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["mode".to_string(), "backend".to_string(), "T".to_string()];
    header.extend(ss.iter().map(|s| format!("S={s}")));
    w.write_record(&header)?;
    for ((mode, backend, t), by_s) in rows {
        let mut record = vec![mode, backend, t.to_string()];
        record.extend(ss.iter().map(|s| by_s.get(s).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<Vec<RawRow>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<RawRow>, _>>()?)
}

/// Reads an aggregate CSV written by [`emit_report`].
pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>, BenchError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize::<AggregateRecord>() {
        let rec = rec?;
        out.push(AggregateRow {
            metric: Metric::from_label(&rec.metric)
                .ok_or_else(|| BenchError::InvalidConfig(format!("unknown metric {:?}", rec.metric)))?,
            mode: rec.mode,
            backend: rec.backend,
            topics: rec.topics,
            subscribers: rec.subscribers,
            rate_hz: rec.rate_hz,
            report: PercentileReport {
                p50: rec.p50_us,
                p999: rec.p999_us,
                n: rec.n,
            },
        });
    }
    Ok(out)
}
