//! Federated orchestration: local update extraction, robust aggregation,
//! simulated poisoning and twin-validated rollback.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Hyperparams, Learner, PolicyParams, ReplayBuffer};
use crate::error::{Error, Result};
use crate::scengen::{Scenario, ScenarioConfig};
use crate::twin::{predictive_rollout, RolloutOptions, TwinState};

/// One agent's contribution to a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdatePacket {
    pub agent_id: usize,
    /// `new_flat - old_flat` over the live actor and critic weights.
    pub delta: Vec<f64>,
    pub sample_count: usize,
    pub round: u64,
    /// Stand-in for channel authentication; unsigned packets are refused.
    pub integrity_ok: bool,
}

impl UpdatePacket {
    pub fn norm(&self) -> f64 {
        norm(&self.delta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationReport {
    pub round: u64,
    pub accepted_ids: Vec<usize>,
    pub rejected_ids: Vec<usize>,
    pub rejection_reasons: BTreeMap<usize, String>,
    pub aggregate_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationPolicy {
    /// Sample-count-weighted mean.
    PlainFedavg,
    /// Coordinatewise mean after dropping the `beta` fraction at each end.
    TrimmedMean { beta: f64 },
    /// Drop updates whose cosine to the coordinatewise median falls below
    /// `threshold`, then trimmed-mean the survivors.
    SimilarityFilter { threshold: f64, beta: f64 },
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        AggregationPolicy::SimilarityFilter {
            threshold: 0.0,
            beta: 0.1,
        }
    }
}

impl FromStr for AggregationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_fedavg" | "fedavg" => Ok(AggregationPolicy::PlainFedavg),
            "trimmed_mean" => Ok(AggregationPolicy::TrimmedMean { beta: 0.1 }),
            "similarity_filter" => Ok(AggregationPolicy::default()),
            _ => Err(Error::Parse(format!("unknown aggregation policy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    /// Local gradient steps per round.
    pub k_local: usize,
    pub aggregation: AggregationPolicy,
    /// Rollback margin: a candidate may lose up to `epsilon * |previous|`.
    pub epsilon: f64,
    pub validation_horizon: usize,
    pub validation_seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            k_local: 4,
            aggregation: AggregationPolicy::default(),
            epsilon: 0.05,
            validation_horizon: 50,
            validation_seed: 7,
        }
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `k_local` MADDPG steps on this agent's buffer, continuing `learner`'s
/// optimizer state from the global model. An empty buffer yields a zero
/// delta with `sample_count` 0.
pub fn local_update_with(
    learner: &mut Learner,
    global: &PolicyParams,
    buffer: &ReplayBuffer,
    hyper: &Hyperparams,
    k_local: usize,
    agent_id: usize,
    round: u64,
    rng: &mut impl Rng,
) -> Result<UpdatePacket> {
    learner.params = global.clone();
    let old = global.to_flat();
    if !buffer.is_empty() {
        let n = hyper.batch_size.min(buffer.len());
        for _ in 0..k_local {
            let batch = buffer.sample(n, rng);
            learner.update_on_batch(&batch, hyper, Some(agent_id), rng)?;
        }
    }
    let new = learner.params.to_flat();
    Ok(UpdatePacket {
        agent_id,
        delta: new.iter().zip(&old).map(|(n, o)| n - o).collect(),
        sample_count: buffer.len(),
        round,
        integrity_ok: true,
    })
}

/// [`local_update_with`] on a fresh optimizer.
pub fn local_update(
    params: &PolicyParams,
    buffer: &ReplayBuffer,
    hyper: &Hyperparams,
    k_local: usize,
    agent_id: usize,
    round: u64,
    rng: &mut impl Rng,
) -> Result<UpdatePacket> {
    let mut learner = Learner::new(params.clone(), hyper);
    local_update_with(&mut learner, params, buffer, hyper, k_local, agent_id, round, rng)
}

/// `params + delta` on the live networks; targets and version untouched.
pub fn apply_delta(params: &PolicyParams, delta: &[f64]) -> Result<PolicyParams> {
    let base = params.to_flat();
    if delta.len() != base.len() {
        return Err(Error::Shape(format!("delta length {} != {}", delta.len(), base.len())));
    }
    let mut out = params.clone();
    let flat: Vec<f64> = base.iter().zip(delta).map(|(p, d)| p + d).collect();
    out.set_flat(&flat)?;
    Ok(out)
}

fn coordinate_trimmed_mean(deltas: &[&[f64]], beta: f64) -> Vec<f64> {
    let n = deltas.len();
    let cut = ((beta.clamp(0.0, 0.5) * n as f64).floor() as usize).min((n - 1) / 2);
    let d = deltas[0].len();
    let mut col = vec![0.0; n];
    (0..d)
        .map(|j| {
            for (c, u) in col.iter_mut().zip(deltas) {
                *c = u[j];
            }
            col.sort_by(f64::total_cmp);
            let kept = &col[cut..n - cut];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

fn coordinate_median(deltas: &[&[f64]]) -> Vec<f64> {
    let n = deltas.len();
    let mut col = vec![0.0; n];
    (0..deltas[0].len())
        .map(|j| {
            for (c, u) in col.iter_mut().zip(deltas) {
                *c = u[j];
            }
            col.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect()
}

/// Aggregate the deltas under `policy` and apply the result to `params`.
/// Packets are processed in agent-id order, so the result does not depend
/// on arrival order. Target networks are reset to the new live weights.
pub fn robust_aggregate(
    updates: &[UpdatePacket],
    params: &PolicyParams,
    policy: AggregationPolicy,
) -> Result<(PolicyParams, AggregationReport)> {
    if updates.is_empty() {
        return Err(Error::QuorumLost(0));
    }
    let len = params.flat_len();
    let mut sorted: Vec<&UpdatePacket> = updates.iter().collect();
    sorted.sort_by_key(|u| u.agent_id);
    let round = sorted.iter().map(|u| u.round).max().unwrap_or(0);
    let mut reasons = BTreeMap::new();
    let mut live: Vec<&UpdatePacket> = Vec::new();
    for u in sorted {
        if u.delta.len() != len {
            reasons.insert(u.agent_id, format!("shape: {} != {len}", u.delta.len()));
        } else if !u.integrity_ok {
            reasons.insert(u.agent_id, "integrity".to_string());
        } else if u.delta.iter().any(|v| !v.is_finite()) {
            reasons.insert(u.agent_id, "non-finite".to_string());
        } else {
            live.push(u);
        }
    }
    if let AggregationPolicy::SimilarityFilter { threshold, .. } = policy {
        if !live.is_empty() {
            let views: Vec<&[f64]> = live.iter().map(|u| u.delta.as_slice()).collect();
            let median = coordinate_median(&views);
            live.retain(|u| {
                let c = cosine(&u.delta, &median);
                let keep = c >= threshold;
                if !keep {
                    reasons.insert(u.agent_id, format!("low-similarity: cos {c:.3} < {threshold}"));
                }
                keep
            });
        }
    }
    if live.is_empty() {
        return Err(Error::QuorumLost(updates.len()));
    }
    let views: Vec<&[f64]> = live.iter().map(|u| u.delta.as_slice()).collect();
    let aggregate = match policy {
        AggregationPolicy::PlainFedavg => {
            let counts: Vec<usize> = live.iter().map(|u| u.sample_count).collect();
            let total: usize = counts.iter().sum();
            let mut acc = vec![0.0; len];
            if total == 0 || counts.iter().all(|&c| c == counts[0]) {
                // Equal weights: the plain mean, summed in agent-id order.
                for u in &live {
                    for (a, d) in acc.iter_mut().zip(&u.delta) {
                        *a += d;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= live.len() as f64);
            } else {
                for u in &live {
                    let w = u.sample_count as f64 / total as f64;
                    for (a, d) in acc.iter_mut().zip(&u.delta) {
                        *a += w * d;
                    }
                }
            }
            acc
        }
        AggregationPolicy::TrimmedMean { beta } | AggregationPolicy::SimilarityFilter { beta, .. } => {
            coordinate_trimmed_mean(&views, beta)
        }
    };
    let mut out = apply_delta(params, &aggregate)?;
    out.target_actor = out.actor.clone();
    out.target_critic = out.critic.clone();
    out.version = params.version + 1;
    let accepted_ids: Vec<usize> = live.iter().map(|u| u.agent_id).collect();
    let mut rejected_ids: Vec<usize> = reasons.keys().copied().collect();
    rejected_ids.sort_unstable();
    Ok((
        out,
        AggregationReport {
            round,
            accepted_ids,
            rejected_ids,
            rejection_reasons: reasons,
            aggregate_norm: norm(&aggregate),
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    /// `-scale * delta`. Scale 1 is the plain sign flip.
    SignFlip { scale: f64 },
    /// `delta + sigma * rms(delta) * N(0, I)`.
    ScaledNoise { sigma: f64 },
    /// Free-riding: an all-zero delta.
    ZeroOut,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::SignFlip { scale } if *scale == 1.0 => write!(f, "sign_flip"),
            AttackKind::SignFlip { scale } => write!(f, "sign_flip:{scale}"),
            AttackKind::ScaledNoise { sigma } => write!(f, "scaled_noise:{sigma}"),
            AttackKind::ZeroOut => write!(f, "zero_out"),
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    /// `sign_flip[:scale]`, `scaled_noise[:sigma]` or `zero_out`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: f64| -> Result<f64> {
            match arg {
                None => Ok(default),
                Some(a) => a
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v >= 0.0)
                    .ok_or_else(|| Error::UnknownAttack(s.to_string())),
            }
        };
        match name {
            "sign_flip" => Ok(AttackKind::SignFlip { scale: num(1.0)? }),
            "scaled_noise" => Ok(AttackKind::ScaledNoise { sigma: num(10.0)? }),
            "zero_out" if arg.is_none() => Ok(AttackKind::ZeroOut),
            _ => Err(Error::UnknownAttack(s.to_string())),
        }
    }
}

/// Corrupt an honest packet. Identity, round and sample count are kept.
pub fn poison(honest: &UpdatePacket, attack: AttackKind, rng: &mut impl Rng) -> UpdatePacket {
    let delta = match attack {
        AttackKind::SignFlip { scale } => honest.delta.iter().map(|d| -scale * d).collect(),
        AttackKind::ScaledNoise { sigma } => {
            let rms = norm(&honest.delta) / (honest.delta.len().max(1) as f64).sqrt();
            honest
                .delta
                .iter()
                .map(|d| d + sigma * rms * rng.sample::<f64, _>(StandardNormal))
                .collect()
        }
        AttackKind::ZeroOut => vec![0.0; honest.delta.len()],
    };
    UpdatePacket {
        delta,
        ..honest.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackRecord {
    pub accepted: bool,
    pub candidate_return: Option<f64>,
    pub previous_return: Option<f64>,
    /// No twin was available; the candidate was accepted unchecked.
    pub degraded: bool,
}

/// Mean twin return of `params` over the validation scenarios. Every policy
/// sees the same seeds and scenarios, so comparisons are paired.
pub fn validation_return(
    twin: &TwinState,
    params: &PolicyParams,
    scenarios: &[Scenario],
    scfg: &ScenarioConfig,
    cfg: &FedConfig,
) -> Result<f64> {
    let run = |overlay: Option<(&Scenario, &ScenarioConfig)>, i: u64| -> Result<f64> {
        let opts = RolloutOptions {
            horizon: cfg.validation_horizon,
            mode: ActMode::Eval,
            seed: Some(crate::rng::derive(cfg.validation_seed, &[i])),
            overlay,
            ..RolloutOptions::default()
        };
        let mut rng = crate::rng::stream(cfg.validation_seed, "validate", &[i]);
        Ok(predictive_rollout(twin, params, &opts, &mut rng)?.episode.total_return())
    };
    if scenarios.is_empty() {
        return run(None, 0);
    }
    let mut sum = 0.0;
    for (i, s) in scenarios.iter().enumerate() {
        sum += run(Some((s, scfg)), i as u64)?;
    }
    Ok(sum / scenarios.len() as f64)
}

/// Keep `candidate` iff its validation return is at least
/// `previous - epsilon * |previous|`, else fall back to `previous`. Without
/// a twin the candidate is accepted and the record marked degraded. The
/// returned model always carries a fresh version number.
pub fn validate_and_rollback(
    candidate: PolicyParams,
    previous: &PolicyParams,
    twin: Option<&TwinState>,
    scenarios: &[Scenario],
    scfg: &ScenarioConfig,
    cfg: &FedConfig,
) -> Result<(PolicyParams, RollbackRecord)> {
    let Some(twin) = twin else {
        return Ok((
            candidate,
            RollbackRecord {
                accepted: true,
                candidate_return: None,
                previous_return: None,
                degraded: true,
            },
        ));
    };
    let cand = validation_return(twin, &candidate, scenarios, scfg, cfg)?;
    let prev = validation_return(twin, previous, scenarios, scfg, cfg)?;
    let accepted = !cfg.epsilon.is_finite() || cand >= prev - cfg.epsilon * prev.abs();
    let record = RollbackRecord {
        accepted,
        candidate_return: Some(cand),
        previous_return: Some(prev),
        degraded: false,
    };
    if accepted {
        Ok((candidate, record))
    } else {
        let mut back = previous.clone();
        back.version = candidate.version.max(previous.version) + 1;
        Ok((back, record))
    }
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLogEntry {
    #[serde(flatten)]
    pub report: AggregationReport,
    pub rollback: Option<RollbackRecord>,
    pub version: u64,
}

/// Append one JSON record per line.
pub fn append_round_log(path: &Path, entry: &RoundLogEntry) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(entry).expect("round log entries serialize");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

pub fn read_round_log(path: &Path) -> Result<Vec<RoundLogEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(format!("round log: {e}"))))
        .collect()
}
