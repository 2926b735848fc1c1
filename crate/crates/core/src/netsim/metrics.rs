use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accounting for one simulation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub generated: u64,
    pub delivered_units: u64,
    pub dropped_units: u64,
    pub sum_latency_ms: f64,
    /// Delivered units by origin node.
    pub per_node_delivered: Vec<u64>,
    /// Delivery credit: each delivered unit contributes `1/hops` to every node on its path.
    pub per_node_credit: Vec<f64>,
    pub per_node_dropped: Vec<u64>,
    pub per_node_generated: Vec<u64>,
    pub mean_queue: f64,
    /// Units still queued network-wide after the step.
    pub queued_after: u64,
}

impl StepMetrics {
    pub fn new(n_nodes: usize) -> Self {
        StepMetrics {
            generated: 0,
            delivered_units: 0,
            dropped_units: 0,
            sum_latency_ms: 0.0,
            per_node_delivered: vec![0; n_nodes],
            per_node_credit: vec![0.0; n_nodes],
            per_node_dropped: vec![0; n_nodes],
            per_node_generated: vec![0; n_nodes],
            mean_queue: 0.0,
            queued_after: 0,
        }
    }
}

/// Episode-level summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub steps: usize,
    /// `None` when nothing was delivered.
    pub latency_ms: Option<f64>,
    pub throughput_kbps: f64,
    pub drop_rate: f64,
    pub fairness: f64,
    pub generated: u64,
    pub delivered: u64,
    pub dropped: u64,
}

/// Jain's index `(sum x)^2 / (n * sum x^2)`; 0 for an all-zero vector.
pub fn jain_index(x: &[f64]) -> f64 {
    let s: f64 = x.iter().sum();
    let s2: f64 = x.iter().map(|v| v * v).sum();
    if x.is_empty() || s2 == 0.0 {
        0.0
    } else {
        s * s / (x.len() as f64 * s2)
    }
}

/// Aggregate a step series. Fairness is computed over agents (the gateway,
/// last in the per-node vectors, is excluded).
pub fn episode_metrics(series: &[StepMetrics], step_duration: f64, unit_kbit: f64) -> Result<MetricsRecord> {
    if series.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    let delivered: u64 = series.iter().map(|m| m.delivered_units).sum();
    let dropped: u64 = series.iter().map(|m| m.dropped_units).sum();
    let generated: u64 = series.iter().map(|m| m.generated).sum();
    let sum_lat: f64 = series.iter().map(|m| m.sum_latency_ms).sum();
    let n = series[0].per_node_delivered.len();
    let per_node: Vec<f64> = (0..n.saturating_sub(1))
        .map(|i| series.iter().map(|m| m.per_node_delivered[i]).sum::<u64>() as f64)
        .collect();
    let duration = series.len() as f64 * step_duration;
    Ok(MetricsRecord {
        steps: series.len(),
        latency_ms: (delivered > 0).then(|| sum_lat / delivered as f64),
        throughput_kbps: delivered as f64 * unit_kbit / duration,
        drop_rate: if generated > 0 {
            dropped as f64 / generated as f64
        } else {
            0.0
        },
        fairness: jain_index(&per_node),
        generated,
        delivered,
        dropped,
    })
}
