//! Comma-separated result tables, their parsers, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::TimePoint;
use crate::error::{Error, Result};

/// Learning curve aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub return_mean: f64,
    pub return_std: f64,
}

/// Per-seed outcome of one baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub baseline: String,
    pub seed: u64,
    pub final_return: f64,
    /// Empty when the curve never plateaued.
    pub convergence_episode: Option<usize>,
    /// First episode whose smoothed return reaches 95% of the final one.
    pub episodes_to_95: Option<usize>,
    pub latency_ms: Option<f64>,
    pub throughput_kbps: f64,
    pub fairness: f64,
    pub clean_delivered: f64,
    pub jammed_delivered: f64,
    pub jam_drop: f64,
    pub rollbacks: usize,
    pub rejected_updates: usize,
    pub aggregation_rounds: usize,
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub baseline: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<SeedRow>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ResultTable {
    pub fn baselines(&self) -> Vec<String> {
        let mut b: Vec<String> = self.rows.iter().map(|r| r.baseline.clone()).collect();
        b.sort();
        b.dedup();
        b
    }

    pub fn rows_for<'a>(&'a self, baseline: &'a str) -> impl Iterator<Item = &'a SeedRow> + 'a {
        self.rows.iter().filter(move |r| r.baseline == baseline)
    }

    /// Per-baseline mean and std of every numeric metric. Rows are sorted by
    /// seed first, so the order seeds ran in does not matter. Metrics that
    /// are missing for some seed (no convergence, no latency) average over
    /// the seeds that have them.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut out = Vec::new();
        for b in self.baselines() {
            let mut rows: Vec<&SeedRow> = self.rows_for(&b).collect();
            rows.sort_by_key(|r| r.seed);
            let metrics: [(&str, Box<dyn Fn(&SeedRow) -> Option<f64>>); 12] = [
                ("final_return", Box::new(|r| Some(r.final_return))),
                ("convergence_episode", Box::new(|r| r.convergence_episode.map(|v| v as f64))),
                ("episodes_to_95", Box::new(|r| r.episodes_to_95.map(|v| v as f64))),
                ("latency_ms", Box::new(|r| r.latency_ms)),
                ("throughput_kbps", Box::new(|r| Some(r.throughput_kbps))),
                ("fairness", Box::new(|r| Some(r.fairness))),
                ("clean_delivered", Box::new(|r| Some(r.clean_delivered))),
                ("jammed_delivered", Box::new(|r| Some(r.jammed_delivered))),
                ("jam_drop", Box::new(|r| Some(r.jam_drop))),
                ("rollbacks", Box::new(|r| Some(r.rollbacks as f64))),
                ("rejected_updates", Box::new(|r| Some(r.rejected_updates as f64))),
                ("aggregation_rounds", Box::new(|r| Some(r.aggregation_rounds as f64))),
            ];
            for (name, f) in metrics.iter() {
                let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
                let (mean, std) = mean_std(&vals);
                out.push(AggregateRow {
                    baseline: b.clone(),
                    metric: name.to_string(),
                    mean,
                    std,
                    n: vals.len(),
                });
            }
        }
        out
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Write rows with a header line. An empty slice still writes the header.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub const CURVE_HEADER: [&str; 3] = ["episode", "return_mean", "return_std"];
pub const TIMESERIES_HEADER: [&str; 4] = ["t", "strategy", "throughput", "latency_ms"];
pub const SEED_HEADER: [&str; 14] = [
    "baseline",
    "seed",
    "final_return",
    "convergence_episode",
    "episodes_to_95",
    "latency_ms",
    "throughput_kbps",
    "fairness",
    "clean_delivered",
    "jammed_delivered",
    "jam_drop",
    "rollbacks",
    "rejected_updates",
    "aggregation_rounds",
];

pub const AGGREGATE_HEADER: [&str; 5] = ["baseline", "metric", "mean", "std", "n"];

pub fn write_learning_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    write_csv(path, &CURVE_HEADER, rows)
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<CurveRow>> {
    read_csv(path)
}

pub fn write_timeseries(path: &Path, rows: &[TimePoint]) -> Result<()> {
    write_csv(path, &TIMESERIES_HEADER, rows)
}

pub fn read_timeseries(path: &Path) -> Result<Vec<TimePoint>> {
    read_csv(path)
}

/// `summary.csv` holds the per-seed rows; `summary_aggregate.csv` the
/// per-baseline means.
pub fn write_summary(dir: &Path, table: &ResultTable) -> Result<()> {
    write_csv(&dir.join("summary.csv"), &SEED_HEADER, &table.rows)?;
    write_csv(&dir.join("summary_aggregate.csv"), &AGGREGATE_HEADER, &table.aggregate())
}

pub fn read_summary(dir: &Path) -> Result<ResultTable> {
    Ok(ResultTable {
        rows: read_csv(&dir.join("summary.csv"))?,
    })
}

/// Mean and std across seeds, episode by episode, over the common length.
pub fn curve_rows(curves: &[Vec<f64>]) -> Vec<CurveRow> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|e| {
            let v: Vec<f64> = curves.iter().map(|c| c[e]).collect();
            let (return_mean, return_std) = mean_std(&v);
            CurveRow {
                episode: e,
                return_mean,
                return_std,
            }
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Identifies a run: what was configured, with which seeds, and digests of
/// every file written next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub preset: String,
    pub baselines: Vec<String>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Hash every regular file under `dir` (except the manifest itself).
    pub fn collect_files(&mut self, dir: &Path) -> Result<()> {
        self.files.clear();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
                let path = entry.map_err(|e| Error::io(&d, e))?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                    let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                    self.files.insert(rel, sha256_hex(&bytes));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}
