//! Two-loop training: real episodes feed federated updates and calibrate the
//! twin, the twin replays generated scenarios for extra centralized updates,
//! and candidates are validated before they are disseminated.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    act_batch, actor_forward, ActMode, AgentSpec, CriticView, ExperienceTuple, Hyperparams, Learner, PolicyParams,
    Provenance, ReplayBuffer,
};
use crate::error::{Error, Result};
use crate::fed::{
    local_update_with, poison, robust_aggregate, validate_and_rollback, AggregationPolicy, AggregationReport,
    AttackKind, FedConfig, RollbackRecord, RoundLogEntry,
};
use crate::netsim::{observation_dim, Action, Jammer, NetConfig, NetworkState, Observation, JAM_LOSS_BUCKETS};
use crate::rng::{derive, stream};
use crate::scengen::{
    curriculum_resample, synth, ClusterKey, GeneratorConfig, PerformanceRecord, Scenario, ScenarioConfig,
    ScenarioGenerator, ScenarioGrid, ScenarioLabel,
};
use crate::twin::{divergence, predictive_rollout, run_episode, Episode, RealSnapshot, RolloutOptions, TwinConfig, TwinState};

#[cfg(test)]
mod tests;

/// The compared training set-ups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    EdgeagentxDt,
    Edgeagentx,
    IndependentRl,
    FedNoMarl,
    CentralizedOracle,
    DtNoGenai,
    NoDefense,
}

impl Baseline {
    pub const ALL: [Baseline; 7] = [
        Baseline::EdgeagentxDt,
        Baseline::Edgeagentx,
        Baseline::IndependentRl,
        Baseline::FedNoMarl,
        Baseline::CentralizedOracle,
        Baseline::DtNoGenai,
        Baseline::NoDefense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::EdgeagentxDt => "edgeagentx_dt",
            Baseline::Edgeagentx => "edgeagentx",
            Baseline::IndependentRl => "independent_rl",
            Baseline::FedNoMarl => "fed_no_marl",
            Baseline::CentralizedOracle => "centralized_oracle",
            Baseline::DtNoGenai => "dt_no_genai",
            Baseline::NoDefense => "no_defense",
        }
    }

    pub fn wiring(self) -> Wiring {
        let full = Wiring {
            twin: true,
            genai: true,
            aggregate: true,
            shared: true,
            critic_view: CriticView::Joint,
            global_view: false,
            rollback: true,
            plain_fedavg: false,
        };
        match self {
            Baseline::EdgeagentxDt => full,
            Baseline::Edgeagentx => Wiring {
                twin: false,
                genai: false,
                ..full
            },
            Baseline::IndependentRl => Wiring {
                twin: false,
                genai: false,
                aggregate: false,
                shared: false,
                critic_view: CriticView::Local,
                ..full
            },
            Baseline::FedNoMarl => Wiring {
                twin: false,
                genai: false,
                critic_view: CriticView::Local,
                ..full
            },
            Baseline::CentralizedOracle => Wiring {
                twin: false,
                genai: false,
                aggregate: false,
                global_view: true,
                ..full
            },
            Baseline::DtNoGenai => Wiring { genai: false, ..full },
            Baseline::NoDefense => Wiring {
                rollback: false,
                plain_fedavg: true,
                ..full
            },
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownBaseline(s.to_string()))
    }
}

/// Which parts of the training loop are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wiring {
    /// Twin sync, twin rollouts, centralized mixed-buffer updates.
    pub twin: bool,
    /// Twin scenarios come from the generator (else replays of real episodes).
    pub genai: bool,
    /// Local updates are federated into one model.
    pub aggregate: bool,
    /// One policy for all agents (else one per agent).
    pub shared: bool,
    pub critic_view: CriticView,
    /// Observations include every agent's queue and liveness.
    pub global_view: bool,
    pub rollback: bool,
    /// Overrides the configured aggregation rule with plain FedAvg.
    pub plain_fedavg: bool,
}

/// A fraction of agents submit corrupted updates every round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub fraction: f64,
    pub kind: AttackKind,
}

impl AttackConfig {
    /// Attackers are the lowest agent ids.
    pub fn attackers(&self, n_agents: usize) -> usize {
        ((self.fraction.clamp(0.0, 1.0) * n_agents as f64).round() as usize).min(n_agents)
    }
}

/// The real network's own disturbances, independent of the policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealWorldConfig {
    /// Chance that an episode carries an attack/failure script.
    pub event_prob: f64,
    pub max_events: usize,
    /// Jammers the twin cannot see; calibration has to absorb them.
    pub hidden_interferers: usize,
    pub hidden_loss: f64,
    pub hidden_radius_m: f64,
    /// Chance that an episode runs under a standing jammer near the gateway.
    pub standing_jam_prob: f64,
    /// Largest offset of that jammer from the gateway.
    pub standing_jam_offset_m: f64,
}

impl Default for RealWorldConfig {
    fn default() -> Self {
        RealWorldConfig {
            event_prob: 0.5,
            max_events: 4,
            hidden_interferers: 1,
            hidden_loss: 0.3,
            hidden_radius_m: 500.0,
            standing_jam_prob: 0.0,
            standing_jam_offset_m: 800.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub baseline: Baseline,
    pub wiring: Wiring,
    pub iterations: usize,
    /// Length of the real episode collected each iteration.
    pub real_steps_per_iter: usize,
    pub twin_episodes_per_iter: usize,
    /// Length of each twin episode.
    pub episode_len: usize,
    /// Mixed-buffer updates per iteration when the twin loop runs.
    pub central_updates: usize,
    /// Fraction of each mixed batch drawn from twin tuples.
    pub sim_to_real: f64,
    /// Loss weight of tuples from adversarial scenarios.
    pub adversarial_weight: f64,
    pub buffer_capacity: usize,
    pub scenario_pool: usize,
    /// Recent real scripts kept for replay when the generator is off.
    pub replay_scripts: usize,
    pub curriculum_tau: f64,
    pub curriculum_history: usize,
    /// Generated scenarios added to the benign one for rollback validation.
    pub validation_scenarios: usize,
    pub attack: Option<AttackConfig>,
    pub net: NetConfig,
    pub hyper: Hyperparams,
    pub fed: FedConfig,
    pub twin: TwinConfig,
    pub generator: GeneratorConfig,
    pub real_world: RealWorldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mut hyper = Hyperparams::default();
        hyper.actor_hidden = vec![32, 32];
        hyper.critic_hidden = vec![64, 64];
        let fed = FedConfig {
            k_local: 1,
            ..FedConfig::default()
        };
        TrainConfig {
            baseline: Baseline::EdgeagentxDt,
            wiring: Baseline::EdgeagentxDt.wiring(),
            iterations: 300,
            real_steps_per_iter: 100,
            twin_episodes_per_iter: 4,
            episode_len: 100,
            central_updates: 3,
            sim_to_real: 0.67,
            adversarial_weight: 2.0,
            buffer_capacity: 20_000,
            scenario_pool: 120,
            replay_scripts: 8,
            curriculum_tau: 20.0,
            curriculum_history: 200,
            validation_scenarios: 1,
            attack: None,
            net: NetConfig::default(),
            hyper,
            fed,
            twin: TwinConfig::default(),
            generator: GeneratorConfig::default(),
            real_world: RealWorldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_baseline(mut self, b: Baseline) -> Self {
        self.baseline = b;
        self.wiring = b.wiring();
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.real_steps_per_iter == 0 || self.episode_len == 0 {
            return Err(Error::Config("episode lengths must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sim_to_real) {
            return Err(Error::Config("sim_to_real must lie in [0, 1]".into()));
        }
        if self.buffer_capacity == 0 || self.hyper.batch_size == 0 {
            return Err(Error::Config("buffer capacity and batch size must be >= 1".into()));
        }
        if !(self.adversarial_weight >= 0.0) {
            return Err(Error::Config("adversarial weight must be >= 0".into()));
        }
        Ok(())
    }

    /// The network as the learners see it (the oracle gets the global view).
    pub fn effective_net(&self) -> NetConfig {
        let mut n = self.net.clone();
        n.global_view = self.wiring.global_view;
        n
    }

    pub fn agent_spec(&self) -> AgentSpec {
        let net = self.effective_net();
        AgentSpec {
            n_agents: net.n_agents,
            obs_dim: observation_dim(&net),
            heads: net.action_heads().to_vec(),
            critic_view: self.wiring.critic_view,
            actor_hidden: self.hyper.actor_hidden.clone(),
            critic_hidden: self.hyper.critic_hidden.clone(),
        }
    }

    fn twin_loop(&self) -> bool {
        self.wiring.twin && self.twin_episodes_per_iter > 0
    }

    fn aggregation(&self) -> AggregationPolicy {
        if self.wiring.plain_fedavg {
            AggregationPolicy::PlainFedavg
        } else {
            self.fed.aggregation
        }
    }
}

/// What gets deployed to the agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployedPolicy {
    Shared(PolicyParams),
    PerAgent(Vec<PolicyParams>),
}

impl DeployedPolicy {
    pub fn act(&self, obs: &[Observation], mode: ActMode, rng: &mut impl Rng) -> Result<(Vec<Action>, Vec<Vec<f64>>)> {
        match self {
            DeployedPolicy::Shared(p) => act_batch(obs, &p.actor, &p.spec.heads, mode, rng),
            DeployedPolicy::PerAgent(ps) => {
                if ps.len() != obs.len() {
                    return Err(Error::ActionShape {
                        expected: ps.len(),
                        got: obs.len(),
                    });
                }
                let mut actions = Vec::with_capacity(obs.len());
                let mut relaxed = Vec::with_capacity(obs.len());
                for (o, p) in obs.iter().zip(ps) {
                    let (a, r) = actor_forward(o, p, mode, rng)?;
                    actions.push(a);
                    relaxed.push(r);
                }
                Ok((actions, relaxed))
            }
        }
    }

    /// Highest version among the deployed parameter sets.
    pub fn version(&self) -> u64 {
        match self {
            DeployedPolicy::Shared(p) => p.version,
            DeployedPolicy::PerAgent(ps) => ps.iter().map(|p| p.version).max().unwrap_or(0),
        }
    }

    pub fn shared(&self) -> Option<&PolicyParams> {
        match self {
            DeployedPolicy::Shared(p) => Some(p),
            DeployedPolicy::PerAgent(_) => None,
        }
    }

    /// Run one episode on `state` with this policy.
    pub fn run(
        &self,
        state: &mut NetworkState,
        steps: usize,
        events: &[crate::netsim::Event],
        mode: ActMode,
        rng: &mut impl Rng,
    ) -> Result<Episode> {
        run_episode(state, steps, events, |_, obs| self.act(obs, mode, rng), Provenance::Real, 1.0)
    }
}

/// One training iteration, as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub iteration: usize,
    pub real_return: f64,
    pub real_delivered: u64,
    pub twin_returns: Vec<f64>,
    /// Total twin/real divergence just before the sync.
    pub divergence: Option<f64>,
    pub aggregation: Option<AggregationReport>,
    /// `None` when validation was bypassed (rollback disabled or no model change).
    pub rollback: Option<RollbackRecord>,
    /// Version of the policy deployed after this iteration.
    pub version: u64,
    /// A twin rollout ran on a mirror older than the staleness bound.
    pub stale_twin: bool,
    /// A mixed batch had to fall back because one pool was short.
    pub mix_shortage: bool,
    /// Set when the iteration aborted; the previous policy stays deployed.
    pub error: Option<String>,
    /// Not serialized, so logs stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

impl RoundRecord {
    fn empty(iteration: usize, version: u64) -> Self {
        RoundRecord {
            iteration,
            real_return: 0.0,
            real_delivered: 0,
            twin_returns: Vec::new(),
            divergence: None,
            aggregation: None,
            rollback: None,
            version,
            stale_twin: false,
            mix_shortage: false,
            error: None,
            wall_clock_ms: 0.0,
        }
    }

    /// Round-log line, for iterations that ran an aggregation.
    pub fn log_entry(&self) -> Option<RoundLogEntry> {
        self.aggregation.as_ref().map(|report| RoundLogEntry {
            report: report.clone(),
            rollback: self.rollback.clone(),
            version: self.version,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: DeployedPolicy,
    pub records: Vec<RoundRecord>,
    pub twin: Option<TwinState>,
    /// Deployment layout of the real network, hidden interferers included.
    pub real_base: NetworkState,
}

impl TrainOutcome {
    pub fn learning_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.real_return).collect()
    }
}

/// Indices into the real and twin buffers for one mixed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub picks: Vec<(Provenance, usize)>,
    /// Some slot wanted a pool that was empty.
    pub shortage: bool,
}

impl MixPlan {
    pub fn twin_count(&self) -> usize {
        self.picks.iter().filter(|p| p.0 == Provenance::Twin).count()
    }

    pub fn resolve<'a>(&self, real: &'a ReplayBuffer, twin: &'a ReplayBuffer) -> Vec<&'a ExperienceTuple> {
        self.picks
            .iter()
            .map(|&(p, i)| match p {
                Provenance::Real => real.get(i),
                Provenance::Twin => twin.get(i),
            })
            .collect()
    }
}

/// Each of `n` slots draws from the twin pool with probability `ratio`,
/// otherwise from the real pool; an empty pool hands its slots to the other.
pub fn real_twin_mix(
    real: &ReplayBuffer,
    twin: &ReplayBuffer,
    ratio: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<MixPlan> {
    if real.is_empty() && twin.is_empty() {
        return Err(Error::EmptyPools);
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mix ratio {ratio} outside [0, 1]")));
    }
    let mut shortage = false;
    let picks = (0..n)
        .map(|_| {
            let want_twin = ratio > 0.0 && rng.random::<f64>() < ratio;
            let src = match (want_twin, real.is_empty(), twin.is_empty()) {
                (true, _, true) => {
                    shortage = true;
                    Provenance::Real
                }
                (false, true, _) => {
                    shortage = true;
                    Provenance::Twin
                }
                (true, _, false) => Provenance::Twin,
                (false, false, _) => Provenance::Real,
            };
            let len = match src {
                Provenance::Real => real.len(),
                Provenance::Twin => twin.len(),
            };
            (src, rng.random_range(0..len))
        })
        .collect();
    Ok(MixPlan { picks, shortage })
}

/// First index where the forward moving average (window `w`) stays within
/// `tol * |final|` of the final window's average, with at least one more
/// full window after it. `None` means the curve never plateaued.
pub fn convergence_episode(curve: &[f64], w: usize, tol: f64) -> Option<usize> {
    let w = w.max(1);
    if curve.len() < w {
        return None;
    }
    let mut smooth = Vec::with_capacity(curve.len() - w + 1);
    let mut acc: f64 = curve[..w].iter().sum();
    smooth.push(acc / w as f64);
    for t in w..curve.len() {
        acc += curve[t] - curve[t - w];
        smooth.push(acc / w as f64);
    }
    let last = *smooth.last().expect("non-empty");
    let band = tol * last.abs();
    let mut start = smooth.len() - 1;
    while start > 0 && (smooth[start - 1] - last).abs() <= band {
        start -= 1;
    }
    if smooth.len() - start > w {
        Some(start)
    } else {
        None
    }
}

/// First index at which the trailing moving average (window `w`) reaches
/// `frac` of the final smoothed value, measured as `final - (1 - frac) *
/// |final|` so negative plateaus work too.
pub fn episodes_to_fraction(curve: &[f64], w: usize, frac: f64) -> Option<usize> {
    let w = w.max(1);
    if curve.len() < w {
        return None;
    }
    let target = {
        let f = final_smoothed(curve, w);
        f - (1.0 - frac) * f.abs()
    };
    let mut acc: f64 = curve[..w - 1].iter().sum();
    for t in w - 1..curve.len() {
        acc += curve[t];
        if acc / w as f64 >= target {
            return Some(t);
        }
        acc -= curve[t + 1 - w];
    }
    None
}

/// Mean of the last `w` entries of a curve (fewer if it is shorter).
pub fn final_smoothed(curve: &[f64], w: usize) -> f64 {
    let tail = &curve[curve.len().saturating_sub(w.max(1))..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

// Stream labels; each phase draws from its own stream so switching a phase
// off never shifts another phase's randomness.
const S_LAYOUT: u64 = 1;
const S_REAL_TX: u64 = 2;
const S_HIDDEN: u64 = 3;

/// The training loop's state between iterations.
pub struct Trainer {
    pub cfg: TrainConfig,
    master: u64,
    pub policy: DeployedPolicy,
    /// Per-agent optimizer state for local updates (one learner per agent).
    locals: Vec<Learner>,
    central: Option<Learner>,
    real_buf: ReplayBuffer,
    twin_buf: ReplayBuffer,
    /// Real layout every episode starts from.
    base: NetworkState,
    real: NetworkState,
    pub twin: Option<TwinState>,
    pool: Vec<Scenario>,
    clusters: Vec<ClusterKey>,
    history: Vec<PerformanceRecord>,
    replays: Vec<Scenario>,
    validation: Vec<Scenario>,
    round: u64,
}

impl Trainer {
    /// Set up models, the real network and (when the twin loop runs) the
    /// twin and its scenario source. `generator` is trained on demand when
    /// the wiring needs one and none is supplied.
    pub fn new(cfg: TrainConfig, generator: Option<&ScenarioGenerator>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let master: u64 = rng.random();
        let net = cfg.effective_net();
        let spec = cfg.agent_spec();
        let n = net.n_agents;
        let mut init = stream(master, "init", &[]);
        let shared = PolicyParams::new(spec.clone(), &mut init);
        let policy = if cfg.wiring.shared {
            DeployedPolicy::Shared(shared.clone())
        } else {
            DeployedPolicy::PerAgent((0..n).map(|_| PolicyParams::new(spec.clone(), &mut init)).collect())
        };
        let locals = match &policy {
            DeployedPolicy::Shared(p) => (0..n).map(|_| Learner::new(p.clone(), &cfg.hyper)).collect(),
            DeployedPolicy::PerAgent(ps) => ps.iter().map(|p| Learner::new(p.clone(), &cfg.hyper)).collect(),
        };
        let central = cfg.wiring.shared.then(|| Learner::new(shared, &cfg.hyper));

        let base = Self::layout(&cfg, master);
        let real = base.clone();

        let mut pool = Vec::new();
        let mut validation = vec![Scenario::benign(cfg.generator.diffusion.grid)];
        let twin = if cfg.twin_loop() {
            if cfg.wiring.genai {
                let trained;
                let g = match generator {
                    Some(g) => g,
                    None => {
                        trained = ScenarioGenerator::train(&cfg.generator, &mut stream(master, "genai", &[]))?;
                        &trained
                    }
                };
                let mut pr = stream(master, "pool", &[]);
                pool = g.generate_pool(cfg.scenario_pool, &net, &mut pr)?;
                validation.extend(pool.iter().take(cfg.validation_scenarios).cloned());
            }
            Some(TwinState::new(&base, cfg.twin.clone()))
        } else {
            None
        };
        let clusters: Vec<ClusterKey> = pool
            .iter()
            .map(ClusterKey::of)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Trainer {
            real_buf: ReplayBuffer::new(cfg.buffer_capacity),
            twin_buf: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            master,
            policy,
            locals,
            central,
            base,
            real,
            twin,
            pool,
            clusters,
            history: Vec::new(),
            replays: Vec::new(),
            validation,
            round: 0,
        })
    }

    /// Real deployment layout for a given master seed, hidden interferers
    /// included.
    fn layout(cfg: &TrainConfig, master: u64) -> NetworkState {
        let net = cfg.effective_net();
        let mut base = NetworkState::random(&net, derive(master, &[S_LAYOUT]));
        let mut hr = stream(master, "hidden", &[S_HIDDEN]);
        let rw = &cfg.real_world;
        for _ in 0..rw.hidden_interferers {
            base.jammers.push(Jammer {
                position: [hr.random_range(0.0..net.area_m), hr.random_range(0.0..net.area_m)],
                radius: rw.hidden_radius_m,
                active: true,
                affected_channels: (0..net.n_channels).collect(),
                loss_multiplier: rw.hidden_loss,
                hidden: true,
            });
        }
        base
    }

    /// The layout [`Trainer::new`] would build from the same `rng`, without
    /// building models or a generator.
    pub fn real_layout(cfg: &TrainConfig, rng: &mut impl Rng) -> NetworkState {
        Self::layout(cfg, rng.random())
    }

    fn scfg(&self) -> &ScenarioConfig {
        &self.cfg.generator.scenario
    }

    fn explore(&self) -> ActMode {
        ActMode::Explore {
            temperature: self.cfg.hyper.temperature,
            noise: self.cfg.hyper.explore_noise,
        }
    }

    /// The real world's script for iteration `it`: either quiet or one draw
    /// from the attack/failure process.
    pub fn real_script(&self, it: usize) -> Scenario {
        let grid = self.cfg.generator.diffusion.grid;
        let mut r = stream(self.master, "real-events", &[it as u64]);
        let events = if r.random::<f64>() < self.cfg.real_world.event_prob {
            let horizon = self.cfg.real_steps_per_iter.saturating_sub(1).max(1) as u32;
            synth::event_corpus(1, grid, horizon, self.cfg.real_world.max_events.max(1), &mut r)
                .pop()
                .map(|s| s.events)
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        Scenario::new(ScenarioGrid::zeros(grid), events, 1.0, ScenarioLabel::Replayed)
    }

    /// A jammer parked near the gateway for the whole of iteration `it`, if
    /// the real world throws one.
    pub fn real_standing_jammer(&self, it: usize) -> Option<Jammer> {
        let rw = &self.cfg.real_world;
        let mut r = stream(self.master, "real-standing", &[it as u64]);
        if r.random::<f64>() >= rw.standing_jam_prob {
            return None;
        }
        let net = &self.cfg.net;
        let gw = net.gateway_pos();
        let off = rw.standing_jam_offset_m;
        let position = [
            (gw[0] + r.random_range(-off..=off)).clamp(0.0, net.area_m),
            (gw[1] + r.random_range(-off..=off)).clamp(0.0, net.area_m),
        ];
        let clear = r.random_range(0..net.n_channels);
        Some(Jammer {
            position,
            radius: net.jammer_radius_m,
            active: true,
            affected_channels: (0..net.n_channels).filter(|&c| c != clear).collect(),
            loss_multiplier: JAM_LOSS_BUCKETS[JAM_LOSS_BUCKETS.len() - 1],
            hidden: false,
        })
    }

    /// Run one iteration. Errors leave the deployed policy untouched and are
    /// reported in the record.
    pub fn step(&mut self, it: usize) -> RoundRecord {
        let t0 = Instant::now();
        let mut rec = RoundRecord::empty(it, self.policy.version());
        if let Err(e) = self.iterate(it, &mut rec) {
            rec.error = Some(e.to_string());
            rec.version = self.policy.version();
        }
        rec.wall_clock_ms = t0.elapsed().as_secs_f64() * 1e3;
        rec
    }

    fn iterate(&mut self, it: usize, rec: &mut RoundRecord) -> Result<()> {
        let cfg = self.cfg.clone();
        let i64 = it as u64;

        // (1) real episode from the deployment layout, clock kept running
        let clock = self.real.step;
        let uid = self.real.next_packet_uid;
        self.real = self.base.clone();
        self.real.step = clock;
        self.real.next_packet_uid = uid;
        self.real.seed = derive(self.master, &[S_REAL_TX, i64]);
        let script = self.real_script(it);
        self.real.jammers.extend(self.real_standing_jammer(it));
        let events = script.instantiate(&mut self.real, clock, &cfg.generator.scenario)?;
        let mut act_rng = stream(self.master, "act", &[i64]);
        let explore = self.explore();
        let ep = self.policy.run(&mut self.real, cfg.real_steps_per_iter, &events, explore, &mut act_rng)?;
        rec.real_return = ep.total_return();
        rec.real_delivered = ep.delivered();
        self.real_buf.extend(ep.tuples);
        if !script.events.is_empty() {
            self.replays.push(script);
            if self.replays.len() > cfg.replay_scripts {
                self.replays.remove(0);
            }
        }

        // (2) local updates, aggregation
        let candidate = self.federated_round(it, rec)?;
        let DeployedPolicy::Shared(previous) = &self.policy else {
            // Independent learners: no aggregation, no validation.
            self.policy = candidate;
            rec.version = self.policy.version();
            return Ok(());
        };
        let previous = previous.clone();
        let DeployedPolicy::Shared(mut candidate) = candidate else {
            unreachable!("shared wiring yields a shared candidate")
        };

        if cfg.twin_loop() {
            // (3) sync and calibrate from a fresh snapshot
            let links = self.real.take_link_stats();
            let snap = RealSnapshot::capture(&self.real, &links);
            let twin = self.twin.as_mut().expect("twin loop has a twin");
            rec.divergence = Some(divergence(twin, &self.real)?.total());
            twin.sync(&snap)?;
            twin.calibrate(&snap);

            // (4) twin episodes on curriculum-weighted scenarios
            for e in 0..cfg.twin_episodes_per_iter {
                let scenario = self.pick_scenario(it, e);
                let weight = if scenario.is_adversarial(self.scfg()) {
                    cfg.adversarial_weight
                } else {
                    1.0
                };
                let opts = RolloutOptions {
                    horizon: cfg.episode_len,
                    mode: self.explore(),
                    seed: Some(derive(self.master, &[S_REAL_TX, i64, 1 + e as u64])),
                    now: Some(self.real.step),
                    overlay: Some((&scenario, self.scfg())),
                    weight,
                };
                let mut r = stream(self.master, "twin-act", &[i64, e as u64]);
                let twin = self.twin.as_ref().expect("twin loop has a twin");
                let out = predictive_rollout(twin, &candidate, &opts, &mut r)?;
                let ret = out.episode.total_return();
                rec.twin_returns.push(ret);
                rec.stale_twin |= out.stale;
                if cfg.wiring.genai {
                    self.history.push(PerformanceRecord {
                        cluster: ClusterKey::of(&scenario),
                        episode_return: ret,
                    });
                    if self.history.len() > cfg.curriculum_history {
                        self.history.remove(0);
                    }
                }
                self.twin_buf.extend(out.episode.tuples);
            }

            // (5) centralized updates over the mixed buffer
            let central = self.central.as_mut().expect("shared wiring has a central learner");
            central.params = candidate;
            let mut r = stream(self.master, "central", &[i64]);
            for _ in 0..cfg.central_updates {
                let plan = real_twin_mix(&self.real_buf, &self.twin_buf, cfg.sim_to_real, cfg.hyper.batch_size, &mut r)?;
                rec.mix_shortage |= plan.shortage;
                let batch = plan.resolve(&self.real_buf, &self.twin_buf);
                central.update_on_batch(&batch, &cfg.hyper, None, &mut r)?;
            }
            candidate = central.params.clone();
        }

        // (6) validate, then disseminate
        let next = if cfg.wiring.rollback {
            let (p, r) = validate_and_rollback(
                candidate,
                &previous,
                self.twin.as_ref().filter(|_| cfg.twin_loop()),
                &self.validation,
                self.scfg(),
                &cfg.fed,
            )?;
            rec.rollback = Some(r);
            p
        } else {
            candidate
        };
        if !next.is_finite() {
            return Err(Error::NumericalDivergence);
        }
        rec.version = next.version;
        self.policy = DeployedPolicy::Shared(next);
        Ok(())
    }

    fn federated_round(&mut self, it: usize, rec: &mut RoundRecord) -> Result<DeployedPolicy> {
        let cfg = &self.cfg;
        let n = cfg.net.n_agents;
        self.round += 1;
        match &self.policy {
            DeployedPolicy::PerAgent(ps) => {
                let mut out = Vec::with_capacity(n);
                for (i, p) in ps.iter().enumerate() {
                    let mut r = stream(self.master, "local", &[it as u64, i as u64]);
                    let l = &mut self.locals[i];
                    l.params = p.clone();
                    if !self.real_buf.is_empty() {
                        let b = cfg.hyper.batch_size.min(self.real_buf.len());
                        for _ in 0..cfg.fed.k_local {
                            let batch = self.real_buf.sample(b, &mut r);
                            l.update_on_batch(&batch, &cfg.hyper, Some(i), &mut r)?;
                        }
                    }
                    out.push(l.params.clone());
                }
                Ok(DeployedPolicy::PerAgent(out))
            }
            DeployedPolicy::Shared(global) if !cfg.wiring.aggregate => {
                // Single centralized learner on the real buffer.
                let central = self.central.as_mut().expect("shared wiring has a central learner");
                central.params = global.clone();
                let mut r = stream(self.master, "local", &[it as u64, 0]);
                if !self.real_buf.is_empty() {
                    let b = cfg.hyper.batch_size.min(self.real_buf.len());
                    for _ in 0..cfg.fed.k_local {
                        let batch = self.real_buf.sample(b, &mut r);
                        central.update_on_batch(&batch, &cfg.hyper, None, &mut r)?;
                    }
                }
                Ok(DeployedPolicy::Shared(central.params.clone()))
            }
            DeployedPolicy::Shared(global) => {
                let attackers = cfg.attack.map_or(0, |a| a.attackers(n));
                let mut packets = Vec::with_capacity(n);
                for i in 0..n {
                    let mut r = stream(self.master, "local", &[it as u64, i as u64]);
                    let packet = local_update_with(
                        &mut self.locals[i],
                        global,
                        &self.real_buf,
                        &cfg.hyper,
                        cfg.fed.k_local,
                        i,
                        self.round,
                        &mut r,
                    )?;
                    packets.push(match cfg.attack {
                        Some(a) if i < attackers => poison(&packet, a.kind, &mut r),
                        _ => packet,
                    });
                }
                let (agg, report) = robust_aggregate(&packets, global, cfg.aggregation())?;
                rec.aggregation = Some(report);
                Ok(DeployedPolicy::Shared(agg))
            }
        }
    }

    fn pick_scenario(&self, it: usize, e: usize) -> Scenario {
        let mut r = stream(self.master, "pick", &[it as u64, e as u64]);
        let grid = self.cfg.generator.diffusion.grid;
        if !self.cfg.wiring.genai || self.pool.is_empty() {
            // Limited set: quiet plus recently observed real scripts.
            let k = r.random_range(0..=self.replays.len());
            return if k == self.replays.len() {
                Scenario::benign(grid)
            } else {
                self.replays[k].clone()
            };
        }
        let weights = curriculum_resample(&self.history, &self.clusters, self.cfg.curriculum_tau);
        let c = match WeightedIndex::new(&weights) {
            Ok(d) => self.clusters[d.sample(&mut r)],
            Err(_) => self.clusters[r.random_range(0..self.clusters.len())],
        };
        let members: Vec<&Scenario> = self.pool.iter().filter(|s| ClusterKey::of(s) == c).collect();
        members[r.random_range(0..members.len())].clone()
    }

    /// Tuples collected so far (real, twin).
    pub fn buffer_sizes(&self) -> (usize, usize) {
        (self.real_buf.len(), self.twin_buf.len())
    }
}

/// Run `cfg.iterations` iterations from fresh models.
pub fn run_training(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<TrainOutcome> {
    run_training_with(cfg, None, rng)
}

/// [`run_training`] reusing an already trained scenario generator.
pub fn run_training_with(
    cfg: &TrainConfig,
    generator: Option<&ScenarioGenerator>,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(cfg.clone(), generator, rng)?;
    let records = (0..cfg.iterations).map(|it| t.step(it)).collect();
    Ok(TrainOutcome {
        policy: t.policy,
        records,
        twin: t.twin,
        real_base: t.base,
    })
}
