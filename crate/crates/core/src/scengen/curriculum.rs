use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::scenario::{Conditioning, Scenario};
use crate::netsim::EventKind;

/// Scenario cluster: conditioning classes plus which event kinds occur.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClusterKey {
    pub conditioning: Conditioning,
    /// Bit `k` set iff an event of kind `EventKind::ALL[k]` occurs.
    pub kinds: u8,
}

impl ClusterKey {
    pub fn of(s: &Scenario) -> Self {
        let kinds = s.events.iter().fold(0u8, |m, e| m | (1 << e.kind.index()));
        ClusterKey {
            conditioning: s.grid.conditioning,
            kinds,
        }
    }

    pub fn has(&self, kind: EventKind) -> bool {
        self.kinds & (1 << kind.index()) != 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub cluster: ClusterKey,
    pub episode_return: f64,
}

/// Sampling weights over `clusters`, proportional to
/// `softmax(-mean_return / tau)`. Clusters absent from the history take the
/// overall mean return; an empty history gives uniform weights.
pub fn curriculum_resample(history: &[PerformanceRecord], clusters: &[ClusterKey], tau: f64) -> Vec<f64> {
    let n = clusters.len();
    if n == 0 {
        return Vec::new();
    }
    if history.is_empty() || !(tau > 0.0) {
        return vec![1.0 / n as f64; n];
    }
    let mut sums: BTreeMap<ClusterKey, (f64, usize)> = BTreeMap::new();
    for r in history {
        let e = sums.entry(r.cluster).or_default();
        e.0 += r.episode_return;
        e.1 += 1;
    }
    let overall = history.iter().map(|r| r.episode_return).sum::<f64>() / history.len() as f64;
    let scores: Vec<f64> = clusters
        .iter()
        .map(|c| {
            let mean = sums.get(c).map_or(overall, |(s, k)| s / *k as f64);
            -mean / tau
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
