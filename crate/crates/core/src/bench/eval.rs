//! Policy evaluation on the real network: clean and jammed episodes, the
//! static shortest-path router and the scripted case study.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::agent::{ActMode, Provenance};
use crate::error::Result;
use crate::netsim::{episode_metrics, Action, Event, Jammer, MetricsRecord, NetworkState, StepMetrics, JAM_LOSS_BUCKETS};
use crate::rng::{derive, stream};
use crate::scengen::{cell_center, default_jam_channels, Scenario, ScenarioConfig};
use crate::trainer::DeployedPolicy;
use crate::twin::{run_episode, Episode};

/// Min-hop routing on the nominal (jam-unaware) link graph, recomputed every
/// `lag` steps. Channel and power stay at their defaults.
#[derive(Clone, Debug)]
pub struct StaticRouter {
    /// `None` never recomputes after the first step.
    pub lag: Option<u32>,
    /// Links whose nominal loss is below this are usable.
    pub max_link_loss: f64,
    routes: Vec<usize>,
    computed_at: Option<u32>,
}

impl StaticRouter {
    pub fn new(lag: Option<u32>) -> Self {
        StaticRouter {
            lag,
            max_link_loss: 0.5,
            routes: Vec::new(),
            computed_at: None,
        }
    }

    /// Next node toward the gateway for every agent (the gateway itself when
    /// no path is known).
    pub fn compute_routes(state: &NetworkState, max_link_loss: f64) -> Vec<usize> {
        let n = state.n_agents();
        let gw = state.gateway;
        let cfg = &state.cfg;
        let p = &state.channel_params;
        let tx = p.tx_power(cfg.default_power_level);
        let usable = |a: usize, b: usize| {
            state.nodes[a].alive
                && state.nodes[b].alive
                && p.snr_loss_curve.loss(p.snr_db(tx, state.nodes[a].distance_to(&state.nodes[b]))) < max_link_loss
        };
        let mut hops = vec![usize::MAX; n + 1];
        hops[gw] = 0;
        let mut queue = VecDeque::from([gw]);
        while let Some(v) = queue.pop_front() {
            for u in 0..n {
                if hops[u] == usize::MAX && usable(u, v) {
                    hops[u] = hops[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        (0..n)
            .map(|i| {
                if hops[i] <= 1 || hops[i] == usize::MAX {
                    return gw;
                }
                (0..n)
                    .filter(|&j| j != i && hops[j] == hops[i] - 1 && usable(i, j))
                    .min_by(|&a, &b| {
                        state.nodes[i]
                            .distance_to(&state.nodes[a])
                            .total_cmp(&state.nodes[i].distance_to(&state.nodes[b]))
                            .then(a.cmp(&b))
                    })
                    .unwrap_or(gw)
            })
            .collect()
    }

    pub fn act(&mut self, state: &NetworkState) -> Vec<Action> {
        let due = match (self.computed_at, self.lag) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(at), Some(lag)) => state.step.saturating_sub(at) >= lag,
        };
        if due {
            self.routes = Self::compute_routes(state, self.max_link_loss);
            self.computed_at = Some(state.step);
        }
        let cfg = &state.cfg;
        (0..state.n_agents())
            .map(|i| {
                let target = self.routes.get(i).copied().unwrap_or(state.gateway);
                let next_hop = state
                    .neighbors(i)
                    .iter()
                    .position(|&j| j == target)
                    .unwrap_or(cfg.k_neighbors);
                Action {
                    next_hop,
                    channel: cfg.default_channel,
                    power_level: cfg.default_power_level,
                }
            })
            .collect()
    }
}

/// A controller under evaluation.
#[derive(Clone, Debug)]
pub enum Strategy<'a> {
    Learned(&'a DeployedPolicy),
    Static { lag: Option<u32> },
}

/// One episode from `base` with the given events and extra jammers, acting
/// greedily. `tx_seed` fixes the channel draws, so strategies compared on
/// the same seed face the same luck.
pub fn run_strategy(
    strategy: &Strategy,
    base: &NetworkState,
    steps: usize,
    scenario: Option<(&Scenario, &ScenarioConfig)>,
    extra_jammers: &[Jammer],
    tx_seed: u64,
) -> Result<Episode> {
    let mut state = base.clone();
    state.seed = tx_seed;
    state.link_stats.clear();
    state.jammers.extend(extra_jammers.iter().cloned());
    let events: Vec<Event> = match scenario {
        Some((s, cfg)) => {
            let start = state.step;
            s.instantiate(&mut state, start, cfg)?
        }
        None => Vec::new(),
    };
    match strategy {
        Strategy::Learned(policy) => {
            let mut r = stream(tx_seed, "eval-act", &[]);
            policy.run(&mut state, steps, &events, ActMode::Eval, &mut r)
        }
        Strategy::Static { lag } => {
            let mut router = StaticRouter::new(*lag);
            let width = base.cfg.action_dim();
            run_episode(
                &mut state,
                steps,
                &events,
                |s, obs| Ok((router.act(s), vec![vec![0.0; width]; obs.len()])),
                Provenance::Real,
                1.0,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub steps: usize,
    /// Standing jammer centres as cells of a `jam_grid` grid. The clear
    /// channel follows from the cell, so the defaults leave each channel
    /// clear in two placements.
    pub jam_cells: Vec<[u8; 2]>,
    pub jam_grid: usize,
    pub jam_radius_m: f64,
    /// Index into the jam-loss buckets.
    pub jam_magnitude: usize,
    pub static_lag: u32,
    /// Case-study episode length and replications.
    pub case_steps: usize,
    pub case_reps: usize,
    /// Moving-average window and plateau tolerance for convergence.
    pub window: usize,
    pub tolerance: f64,
    pub eval_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 3,
            steps: 100,
            jam_cells: vec![[3, 8], [13, 8], [8, 3], [8, 13], [4, 6], [12, 10]],
            jam_grid: 16,
            jam_radius_m: 1000.0,
            jam_magnitude: 2,
            static_lag: 10,
            case_steps: 100,
            case_reps: 5,
            window: 20,
            tolerance: 0.1,
            eval_seed: 1000,
        }
    }
}

impl EvalConfig {
    pub fn standing_jammers(&self, base: &NetworkState) -> Vec<Jammer> {
        self.jam_cells
            .iter()
            .map(|&cell| {
                Jammer {
                    position: cell_center(cell, self.jam_grid, base.cfg.area_m),
                    radius: self.jam_radius_m,
                    active: true,
                    affected_channels: default_jam_channels(cell, base.cfg.n_channels),
                    loss_multiplier: JAM_LOSS_BUCKETS[self.jam_magnitude.min(JAM_LOSS_BUCKETS.len() - 1)],
                    hidden: false,
                }
            })
            .collect()
    }
}

/// Clean and jammed performance of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JamEval {
    pub clean: MetricsRecord,
    /// Mean delivered units per episode, clean and under a standing jammer.
    pub clean_delivered: f64,
    pub jammed_delivered: f64,
    /// `1 - jammed / clean`.
    pub drop: f64,
}

/// Greedy episodes without and with each standing jammer placement.
pub fn jam_eval(strategy: &Strategy, base: &NetworkState, cfg: &EvalConfig) -> Result<JamEval> {
    let mut clean_series: Vec<StepMetrics> = Vec::new();
    let mut clean = 0.0;
    for e in 0..cfg.episodes {
        let ep = run_strategy(strategy, base, cfg.steps, None, &[], derive(cfg.eval_seed, &[e as u64]))?;
        clean += ep.delivered() as f64;
        clean_series.extend(ep.series);
    }
    clean /= cfg.episodes.max(1) as f64;
    let mut jammed = 0.0;
    let jammers = cfg.standing_jammers(base);
    for j in &jammers {
        for e in 0..cfg.episodes {
            let seed = derive(cfg.eval_seed, &[e as u64]);
            let ep = run_strategy(strategy, base, cfg.steps, None, std::slice::from_ref(j), seed)?;
            jammed += ep.delivered() as f64;
        }
    }
    jammed /= (cfg.episodes * jammers.len()).max(1) as f64;
    let record = episode_metrics(&clean_series, base.step_duration, base.cfg.unit_kbit)?;
    Ok(JamEval {
        clean: record,
        clean_delivered: clean,
        jammed_delivered: jammed,
        drop: if clean > 0.0 { 1.0 - jammed / clean } else { 0.0 },
    })
}

/// Throughput and latency of one strategy at one step, averaged over
/// replications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePoint {
    pub t: u32,
    pub strategy: String,
    pub throughput: f64,
    /// `None` when nothing was delivered in that step.
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyTotals {
    pub strategy: String,
    pub pre_attack: f64,
    pub stress: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyResult {
    pub series: Vec<TimePoint>,
    pub totals: Vec<StrategyTotals>,
}

impl CaseStudyResult {
    pub fn stress(&self, strategy: &str) -> Option<f64> {
        self.totals.iter().find(|t| t.strategy == strategy).map(|t| t.stress)
    }
}

/// Stress window of the scripted case study, inclusive.
pub const STRESS_WINDOW: (u32, u32) = (50, 85);

/// Replay the case-study scenario from `base` under each named strategy,
/// `reps` times with shared seeds. Delivered units are summed per window and
/// averaged over replications.
pub fn case_study(
    strategies: &[(String, Strategy)],
    base: &NetworkState,
    scenario: &Scenario,
    scfg: &ScenarioConfig,
    steps: usize,
    reps: usize,
    seed: u64,
) -> Result<CaseStudyResult> {
    let mut out = CaseStudyResult::default();
    let reps = reps.max(1);
    let unit = base.cfg.unit_kbit / base.step_duration;
    for (name, strategy) in strategies {
        let mut thr = vec![0.0; steps];
        let mut lat = vec![(0.0, 0u64); steps];
        let (mut pre, mut stress) = (0.0, 0.0);
        for r in 0..reps {
            let ep = run_strategy(strategy, base, steps, Some((scenario, scfg)), &[], derive(seed, &[r as u64]))?;
            for (t, m) in ep.series.iter().enumerate() {
                thr[t] += m.delivered_units as f64 * unit;
                lat[t].0 += m.sum_latency_ms;
                lat[t].1 += m.delivered_units;
                let t = t as u32;
                if t < STRESS_WINDOW.0 {
                    pre += m.delivered_units as f64;
                } else if t <= STRESS_WINDOW.1 {
                    stress += m.delivered_units as f64;
                }
            }
        }
        for t in 0..steps {
            out.series.push(TimePoint {
                t: t as u32,
                strategy: name.clone(),
                throughput: thr[t] / reps as f64,
                latency_ms: (lat[t].1 > 0).then(|| lat[t].0 / lat[t].1 as f64),
            });
        }
        out.totals.push(StrategyTotals {
            strategy: name.clone(),
            pre_attack: pre / reps as f64,
            stress: stress / reps as f64,
        });
    }
    Ok(out)
}
