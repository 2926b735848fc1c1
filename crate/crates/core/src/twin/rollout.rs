use rand::Rng;

use super::TwinState;
use crate::agent::{act_batch, ActMode, ExperienceTuple, PolicyParams, Provenance};
use crate::error::Result;
use crate::netsim::{episode_metrics, Action, Event, MetricsRecord, NetworkState, Observation, StepMetrics};
use crate::scengen::{Scenario, ScenarioConfig};

/// One simulated episode.
#[derive(Clone, Debug, Default)]
pub struct Episode {
    pub tuples: Vec<ExperienceTuple>,
    pub series: Vec<StepMetrics>,
    /// Mean agent reward of each step.
    pub step_rewards: Vec<f64>,
}

impl Episode {
    /// Sum over steps of the mean agent reward.
    pub fn total_return(&self) -> f64 {
        self.step_rewards.iter().sum()
    }

    pub fn delivered(&self) -> u64 {
        self.series.iter().map(|m| m.delivered_units).sum()
    }
}

/// Run `steps` steps with an arbitrary controller mapping the state and the
/// agents' observations to actions plus the action vectors to record.
/// Events fire when their time equals the state's clock.
pub fn run_episode<F>(
    state: &mut NetworkState,
    steps: usize,
    events: &[Event],
    mut controller: F,
    provenance: Provenance,
    weight: f64,
) -> Result<Episode>
where
    F: FnMut(&NetworkState, &[Observation]) -> Result<(Vec<Action>, Vec<Vec<f64>>)>,
{
    let n = state.n_agents();
    let mut obs: Vec<Observation> = (0..n).map(|i| state.observe(i)).collect();
    let mut ep = Episode::default();
    for _ in 0..steps {
        let (actions, relaxed) = controller(state, &obs)?;
        let due: Vec<Event> = events.iter().filter(|e| e.time == state.step).cloned().collect();
        let out = state.step(&actions, &due)?;
        ep.step_rewards.push(out.rewards.iter().sum::<f64>() / n as f64);
        // Fixed-length episodes are truncated, not terminated, so `done` stays false.
        ep.tuples.push(ExperienceTuple {
            joint_obs: obs.iter().flat_map(|o| o.0.iter().copied()).collect(),
            joint_action: relaxed.into_iter().flatten().collect(),
            rewards: out.rewards,
            joint_next_obs: out.observations.iter().flat_map(|o| o.0.iter().copied()).collect(),
            done: false,
            provenance,
            weight,
        });
        ep.series.push(out.metrics);
        obs = out.observations;
    }
    Ok(ep)
}

/// [`run_episode`] driven by a shared actor.
#[allow(clippy::too_many_arguments)]
pub fn run_policy_episode(
    state: &mut NetworkState,
    params: &PolicyParams,
    steps: usize,
    events: &[Event],
    mode: ActMode,
    provenance: Provenance,
    weight: f64,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let heads = params.spec.heads.clone();
    run_episode(
        state,
        steps,
        events,
        |_, obs| act_batch(obs, &params.actor, &heads, mode, rng),
        provenance,
        weight,
    )
}

#[derive(Clone, Debug)]
pub struct RolloutOptions<'a> {
    pub horizon: usize,
    pub mode: ActMode,
    /// Overrides the mirror's transmission seed for this rollout.
    pub seed: Option<u64>,
    /// Real clock, for the staleness check; `None` skips it.
    pub now: Option<u32>,
    pub overlay: Option<(&'a Scenario, &'a ScenarioConfig)>,
    /// Loss weight stamped on the produced tuples.
    pub weight: f64,
}

impl Default for RolloutOptions<'_> {
    fn default() -> Self {
        RolloutOptions {
            horizon: 0,
            mode: ActMode::Eval,
            seed: None,
            now: None,
            overlay: None,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub episode: Episode,
    /// `None` for a zero-step rollout.
    pub record: Option<MetricsRecord>,
    /// The twin was synced longer ago than the staleness bound.
    pub stale: bool,
}

/// Run the policy forward on a clone of the mirror. The twin itself is not
/// modified.
pub fn predictive_rollout(
    twin: &TwinState,
    params: &PolicyParams,
    opts: &RolloutOptions,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let stale = opts
        .now
        .is_some_and(|now| now.saturating_sub(twin.last_sync_step) > twin.cfg.staleness_bound);
    let mut sim = twin.mirror.clone();
    sim.link_stats.clear();
    if let Some(seed) = opts.seed {
        sim.seed = seed;
    }
    let events = match opts.overlay {
        Some((scenario, cfg)) => {
            let start = sim.step;
            scenario.instantiate(&mut sim, start, cfg)?
        }
        None => Vec::new(),
    };
    let episode = run_policy_episode(
        &mut sim,
        params,
        opts.horizon,
        &events,
        opts.mode,
        Provenance::Twin,
        opts.weight,
        rng,
    )?;
    let record = if episode.series.is_empty() {
        None
    } else {
        Some(episode_metrics(&episode.series, sim.step_duration, sim.cfg.unit_kbit)?)
    };
    Ok(Rollout { episode, record, stale })
}
