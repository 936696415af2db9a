//! Plain-text exports of evaluation results: JSON for machines, CSV for
//! spreadsheets. Floats are written with `Display`, which emits the shortest
//! string that parses back to the same value, so re-serializing a parsed
//! report is lossless.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{BenchReport, MetricReport};

use super::atomic_write;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::format(format!("report serialization failed: {e}")))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn write_metrics_json(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, report)
}

pub fn write_bench_json(path: &Path, report: &BenchReport) -> Result<()> {
    write_json(path, report)
}

/// CSV rendering of a metric report: one row per subclass, then a pooled
/// `overall` row. Absent log-densities render as empty fields.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut out = String::from("subclass,n,frechet,sliced_w2,diversity,mean_log_density\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.per_class {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.subclass,
            c.n,
            c.frechet,
            c.sliced_w2,
            c.diversity,
            opt(c.mean_log_density)
        )
        .expect("string write");
    }
    let o = &report.overall;
    writeln!(
        out,
        "overall,{},{},{},{},{}",
        o.n,
        o.frechet,
        o.sliced_w2,
        o.diversity,
        opt(o.mean_log_density)
    )
    .expect("string write");
    out
}

pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    atomic_write(path, metrics_csv(report).as_bytes())
}

/// CSV rendering of a benchmark report: one row per (mode, seed) pair.
pub fn bench_csv(report: &BenchReport) -> String {
    let mut out = String::from(
        "mode,seed,overall_frechet,mean_class_sw2,diversity,trainable_fraction,\
         final_loss,train_steps_per_sec,separation_ratio,super_nearest_own\n",
    );
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.mode.name(),
            r.seed,
            r.overall_frechet,
            r.mean_class_sw2,
            r.diversity,
            r.trainable_fraction,
            r.final_loss,
            r.train_steps_per_sec,
            r.separation_ratio,
            r.super_nearest_own
        )
        .expect("string write");
    }
    out
}

pub fn write_bench_csv(path: &Path, report: &BenchReport) -> Result<()> {
    atomic_write(path, bench_csv(report).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{BenchRow, BenchSetup, ClassMetrics, OverallMetrics};
    use crate::model::FinetuneMode;

    fn tiny_metrics() -> MetricReport {
        MetricReport {
            per_class: vec![ClassMetrics {
                subclass: 0,
                n: 4,
                frechet: 0.125,
                sliced_w2: 0.1,
                diversity: 1.5,
                mean_log_density: None,
            }],
            overall: OverallMetrics {
                n: 4,
                frechet: 0.25,
                frechet_jitter: 1e-6,
                sliced_w2: 0.2,
                diversity: 1.75,
                mean_log_density: Some(-3.5),
            },
        }
    }

    #[test]
    fn metrics_csv_has_fixed_columns_and_roundtrip_floats() {
        let csv = metrics_csv(&tiny_metrics());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "subclass,n,frechet,sliced_w2,diversity,mean_log_density");
        assert_eq!(lines[1], "0,4,0.125,0.1,1.5,");
        assert_eq!(lines[2], "overall,4,0.25,0.2,1.75,-3.5");
        // Every float field parses back to the exact value.
        assert_eq!(lines[1].split(',').nth(2).unwrap().parse::<f64>().unwrap(), 0.125);
    }

    #[test]
    fn bench_csv_lists_one_row_per_mode_seed() {
        let report = BenchReport {
            setup: BenchSetup::smoke(),
            rows: vec![BenchRow {
                mode: FinetuneMode::Finediffusion,
                seed: 1,
                overall_frechet: 0.5,
                frechet_jitter: 1e-6,
                mean_class_sw2: 0.25,
                diversity: 2.0,
                trainable_fraction: 0.0477,
                final_loss: 0.9,
                train_steps_per_sec: 100.0,
                separation_ratio: 2.5,
                super_nearest_own: true,
            }],
        };
        let csv = bench_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("mode,seed,overall_frechet"));
        assert!(lines[1].starts_with("finediffusion,1,0.5,0.25,2,"));
        assert!(lines[1].ends_with(",true"));
    }

    #[test]
    fn json_writers_emit_parseable_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        write_metrics_json(&path, &tiny_metrics()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, tiny_metrics());
    }

    #[test]
    fn csv_writer_writes_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &tiny_metrics()).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), metrics_csv(&tiny_metrics()));
    }
}
