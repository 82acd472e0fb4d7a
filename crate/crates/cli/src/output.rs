//! CSV tables and JSON run records written under the output directory.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use fewshot::dynamics::{Breakpoint, DynamicsCurve, SweepTable};
use fewshot::infer::Metrics;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// One metrics CSV row; `seed` is `mean` on the summary row.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRow {
    pub protocol: String,
    pub seed: String,
    pub peft: String,
    pub alpha: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub k: usize,
    pub base_acc: f64,
    pub novel_acc: Option<f64>,
    pub hm: Option<f64>,
    pub text_encoder_calls: f64,
}

#[derive(Clone, Debug, Serialize)]
struct SweepCsvRow {
    param: f64,
    base_acc: f64,
    novel_acc: Option<f64>,
    hm: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakpoint: Option<Breakpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub duration_s: f64,
    pub seeds: Vec<SeedRecord>,
    pub files: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Appends the across-seed mean row.
pub fn with_mean(mut rows: Vec<MetricsRow>) -> Vec<MetricsRow> {
    let first = rows[0].clone();
    let opt_mean = |f: fn(&MetricsRow) -> Option<f64>| rows.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| mean(v.into_iter()));
    let row = MetricsRow {
        seed: "mean".into(),
        base_acc: mean(rows.iter().map(|r| r.base_acc)),
        novel_acc: opt_mean(|r| r.novel_acc),
        hm: opt_mean(|r| r.hm),
        text_encoder_calls: mean(rows.iter().map(|r| r.text_encoder_calls)),
        ..first
    };
    rows.push(row);
    rows
}

fn write_csv<T: Serialize>(path: &Path, config_hash: &str, rows: &[T]) -> Result<()> {
    let mut buf = format!("# config_hash: {config_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    std::fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_metrics(path: &Path, config_hash: &str, rows: &[MetricsRow]) -> Result<()> {
    write_csv(path, config_hash, rows)
}

pub fn write_curve(path: &Path, curve: &DynamicsCurve) -> Result<()> {
    write_csv(path, &curve.config_hash, &curve.records)
}

pub fn write_sweep(path: &Path, config_hash: &str, table: &SweepTable) -> Result<()> {
    let rows: Vec<SweepCsvRow> = table.rows.iter().map(|r| SweepCsvRow { param: r.param, base_acc: r.base_acc, novel_acc: r.novel_acc, hm: r.hm }).collect();
    write_csv(path, config_hash, &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

