//! Deterministic discrete-time simulation of a tactical mesh network.
//!
//! Agents are nodes `0..n_agents`; the gateway is the last node. Each call to
//! [`NetworkState::step`] runs the fixed phase order documented there.
//! Transmission outcomes are counter-based draws keyed by
//! `(seed, packet uid, hop, step)`, so replaying the same action stream against
//! a modified world (for example with an extra jammer) compares packets under
//! common random numbers.

mod channel;
mod event;
mod metrics;
mod observe;
mod step;

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use channel::{compose_loss, ChannelParams, LossCurve};
pub use event::{Event, EventKind, JAM_LOSS_BUCKETS, SURGE_FACTOR_BUCKETS};
pub use metrics::{episode_metrics, jain_index, MetricsRecord, StepMetrics};
pub use observe::{observation_dim, Observation};
pub use step::{Action, StepOutput};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub throughput: f64,
    pub latency: f64,
    pub drop: f64,
    pub global: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            throughput: 1.0,
            latency: 0.2,
            drop: 0.5,
            global: 0.5,
        }
    }
}

/// Static configuration of a simulated network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub n_agents: usize,
    pub area_m: f64,
    pub n_channels: usize,
    pub k_neighbors: usize,
    pub queue_capacity: usize,
    /// Head-of-queue packets a node may transmit per step.
    pub service_rate: usize,
    pub ttl: u8,
    pub step_duration_s: f64,
    /// Data units generated per alive agent per step.
    pub offered_load: f64,
    /// Per-node speed range, meters per step.
    pub speed_range: (f64, f64),
    pub unit_kbit: f64,
    pub jam_detect_threshold: f64,
    /// Smoothing factor of each node's recent transmission success rate.
    pub success_ema: f64,
    pub default_power_level: usize,
    pub default_channel: usize,
    /// `None` places the gateway at the center of the area.
    pub gateway_position: Option<[f64; 2]>,
    pub jammer_radius_m: f64,
    /// Append all agents' queue fill and alive flags to every observation.
    pub global_view: bool,
    pub channel: ChannelParams,
    pub reward: RewardWeights,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_agents: 8,
            area_m: 2500.0,
            n_channels: 3,
            k_neighbors: 4,
            queue_capacity: 8,
            service_rate: 2,
            ttl: 8,
            step_duration_s: 0.1,
            offered_load: 0.5,
            speed_range: (0.0, 2.0),
            unit_kbit: 1.0,
            jam_detect_threshold: 0.5,
            success_ema: 0.2,
            default_power_level: 1,
            default_channel: 0,
            gateway_position: None,
            jammer_radius_m: 1000.0,
            global_view: false,
            channel: ChannelParams::default(),
            reward: RewardWeights::default(),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_agents == 0 {
            return bad("n_agents must be >= 1".into());
        }
        if self.area_m <= 0.0 || self.step_duration_s <= 0.0 {
            return bad("area and step duration must be positive".into());
        }
        if self.n_channels == 0 || self.k_neighbors == 0 || self.queue_capacity == 0 {
            return bad("channels, neighbors and queue capacity must be >= 1".into());
        }
        if self.default_channel >= self.n_channels
            || self.default_power_level >= self.channel.tx_power_table.len()
        {
            return bad("default channel/power out of range".into());
        }
        self.channel.validate().map_err(Error::Config)
    }

    pub fn gateway_pos(&self) -> [f64; 2] {
        self.gateway_position
            .unwrap_or([self.area_m / 2.0, self.area_m / 2.0])
    }

    pub fn n_nodes(&self) -> usize {
        self.n_agents + 1
    }

    pub fn action_heads(&self) -> [usize; 3] {
        [
            self.k_neighbors + 1,
            self.n_channels,
            self.channel.tx_power_table.len(),
        ]
    }

    pub fn action_dim(&self) -> usize {
        self.action_heads().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub uid: u64,
    pub origin: usize,
    pub created_step: u32,
    pub hops: u8,
    /// Nodes that transmitted this packet, origin first.
    pub path: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub id: usize,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub alive: bool,
    pub compromised: bool,
    pub queue: VecDeque<Packet>,
    pub channel: usize,
    pub power_level: usize,
    /// Fractional packet-generation credit carried between steps.
    pub load_credit: f64,
    /// Exponential moving average of own transmission success.
    pub recent_success: f64,
}

impl NodeState {
    pub fn distance_to(&self, other: &NodeState) -> f64 {
        dist(self.position, other.position)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jammer {
    pub position: [f64; 2],
    pub radius: f64,
    pub active: bool,
    pub affected_channels: Vec<usize>,
    pub loss_multiplier: f64,
    /// Unmodeled interference: never reported in telemetry.
    #[serde(default)]
    pub hidden: bool,
}

impl Jammer {
    pub fn covers(&self, pos: [f64; 2], channel: usize) -> bool {
        self.active && self.affected_channels.contains(&channel) && dist(self.position, pos) <= self.radius
    }
}

/// Additive loss offsets over a coarse square grid covering the area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasGrid {
    pub cells: usize,
    pub area_m: f64,
    pub values: Vec<f64>,
}

impl BiasGrid {
    pub fn zeros(cells: usize, area_m: f64) -> Self {
        BiasGrid {
            cells,
            area_m,
            values: vec![0.0; cells * cells],
        }
    }

    pub fn cell_of(&self, pos: [f64; 2]) -> usize {
        let c = |v: f64| (((v / self.area_m) * self.cells as f64).floor().max(0.0) as usize).min(self.cells - 1);
        c(pos[1]) * self.cells + c(pos[0])
    }

    pub fn at(&self, pos: [f64; 2]) -> f64 {
        self.values[self.cell_of(pos)]
    }
}

/// Per-link transmission telemetry accumulated since the last snapshot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub attempts: u32,
    pub failures: u32,
    pub sum_distance: f64,
    pub sum_power_dbm: f64,
    /// Jam multiplier from jammers visible in telemetry, summed over attempts.
    pub sum_visible_jam: f64,
    pub sum_midpoint: [f64; 2],
}

impl LinkRecord {
    pub fn loss_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.failures as f64 / self.attempts as f64
        }
    }

    pub fn mean(&self, v: f64) -> f64 {
        v / self.attempts.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surge {
    pub factor: f64,
    pub until: u32,
}

/// Full simulator world state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub step: u32,
    pub step_duration: f64,
    pub nodes: Vec<NodeState>,
    pub jammers: Vec<Jammer>,
    pub gateway: usize,
    /// Base units per alive agent per step (before scenario multiplier and surges).
    pub offered_load: f64,
    pub load_multiplier: f64,
    pub surges: Vec<Surge>,
    pub channel_params: ChannelParams,
    /// Key of the counter-based transmission draws.
    pub seed: u64,
    pub next_packet_uid: u64,
    pub loss_bias: Option<BiasGrid>,
    #[serde(with = "link_map")]
    pub link_stats: BTreeMap<(u16, u16), LinkRecord>,
    pub cfg: NetConfig,
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl NetworkState {
    /// Uniformly random agent layout and velocities; gateway fixed.
    pub fn random(cfg: &NetConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, "layout", &[]);
        let positions: Vec<[f64; 2]> = (0..cfg.n_agents)
            .map(|_| [r.random_range(0.0..cfg.area_m), r.random_range(0.0..cfg.area_m)])
            .collect();
        let mut state = Self::with_positions(cfg, &positions, seed);
        let (lo, hi) = cfg.speed_range;
        for n in state.nodes.iter_mut().take(cfg.n_agents) {
            let speed = if hi > lo { r.random_range(lo..hi) } else { lo };
            let heading = r.random_range(0.0..std::f64::consts::TAU);
            n.velocity = [speed * heading.cos(), speed * heading.sin()];
        }
        state
    }

    /// Agents at the given positions, all stationary.
    pub fn with_positions(cfg: &NetConfig, positions: &[[f64; 2]], seed: u64) -> Self {
        assert_eq!(positions.len(), cfg.n_agents, "one position per agent");
        let mk = |id: usize, position: [f64; 2]| NodeState {
            id,
            position,
            velocity: [0.0, 0.0],
            alive: true,
            compromised: false,
            queue: VecDeque::new(),
            channel: cfg.default_channel,
            power_level: cfg.default_power_level,
            load_credit: 0.0,
            recent_success: 1.0,
        };
        let mut nodes: Vec<NodeState> = positions.iter().enumerate().map(|(i, &p)| mk(i, p)).collect();
        nodes.push(mk(cfg.n_agents, cfg.gateway_pos()));
        NetworkState {
            step: 0,
            step_duration: cfg.step_duration_s,
            nodes,
            jammers: Vec::new(),
            gateway: cfg.n_agents,
            offered_load: cfg.offered_load,
            load_multiplier: 1.0,
            surges: Vec::new(),
            channel_params: cfg.channel.clone(),
            seed,
            next_packet_uid: 0,
            loss_bias: None,
            link_stats: BTreeMap::new(),
            cfg: cfg.clone(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.gateway
    }

    /// SNR of the link `a -> b` at `a`'s current power level.
    ///
    /// Coincident nodes are treated as 1 m apart.
    pub fn link_snr(&self, a: usize, b: usize) -> Result<f64> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if !na.alive {
            return Err(Error::DeadLink(a));
        }
        if !nb.alive {
            return Err(Error::DeadLink(b));
        }
        Ok(self.snr_between(na, nb))
    }

    fn snr_between(&self, na: &NodeState, nb: &NodeState) -> f64 {
        let p = &self.channel_params;
        let mut snr = p.snr_db(p.tx_power(na.power_level), na.distance_to(nb));
        if p.jam_snr_penalty_db != 0.0
            && self.jammers.iter().any(|j| j.covers(nb.position, na.channel))
        {
            snr -= p.jam_snr_penalty_db;
        }
        snr
    }

    /// Sum of loss multipliers of active jammers covering `pos` on `channel`.
    pub fn jam_multiplier(&self, pos: [f64; 2], channel: usize) -> f64 {
        self.jammers
            .iter()
            .filter(|j| j.covers(pos, channel))
            .map(|j| j.loss_multiplier)
            .sum()
    }

    fn visible_jam_multiplier(&self, pos: [f64; 2], channel: usize) -> f64 {
        self.jammers
            .iter()
            .filter(|j| !j.hidden && j.covers(pos, channel))
            .map(|j| j.loss_multiplier)
            .sum()
    }

    /// Packet-loss probability of the link `a -> b` using `a`'s channel and power.
    pub fn link_loss(&self, a: usize, b: usize) -> Result<f64> {
        let snr = self.link_snr(a, b)?;
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        Ok(self.compose(snr, na, nb))
    }

    fn compose(&self, snr: f64, na: &NodeState, nb: &NodeState) -> f64 {
        let jam = self.jam_multiplier(nb.position, na.channel);
        let bias = self
            .loss_bias
            .as_ref()
            .map(|g| g.at(midpoint(na.position, nb.position)))
            .unwrap_or(0.0);
        compose_loss(&self.channel_params.snr_loss_curve, snr, jam, bias)
    }

    fn node(&self, i: usize) -> Result<&NodeState> {
        self.nodes
            .get(i)
            .ok_or_else(|| Error::UnknownEntity(format!("node {i}")))
    }

    /// The `k` nearest other agents of `i` ordered by (distance, id); the
    /// gateway is never listed (it is the separate direct option).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let me = &self.nodes[i];
        let mut others: Vec<(f64, usize)> = self.nodes[..self.gateway]
            .iter()
            .filter(|n| n.id != i)
            .map(|n| (me.distance_to(n), n.id))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.truncate(self.cfg.k_neighbors);
        others.into_iter().map(|(_, id)| id).collect()
    }

    /// Resolve a next-hop action index to a node index. Index `k` and empty
    /// neighbor slots map to the gateway.
    pub fn resolve_next_hop(&self, next_hop: usize, neighbors: &[usize]) -> usize {
        neighbors.get(next_hop).copied().unwrap_or(self.gateway)
    }

    pub fn effective_load(&self) -> f64 {
        let surge: f64 = self
            .surges
            .iter()
            .filter(|s| self.step < s.until)
            .map(|s| s.factor)
            .product();
        self.offered_load * self.load_multiplier * surge
    }

    pub fn queued_units(&self) -> usize {
        self.nodes.iter().map(|n| n.queue.len()).sum()
    }

    /// SHA-256 over the canonical serialization of the state.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("state serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Drain telemetry accumulated since the previous call.
    pub fn take_link_stats(&mut self) -> BTreeMap<(u16, u16), LinkRecord> {
        std::mem::take(&mut self.link_stats)
    }

    fn record_attempt(&mut self, a: usize, b: usize, failed: bool) {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        let d = na.distance_to(nb);
        let power = self.channel_params.tx_power(na.power_level);
        let vis = self.visible_jam_multiplier(nb.position, na.channel);
        let mid = midpoint(na.position, nb.position);
        let rec = self.link_stats.entry((a as u16, b as u16)).or_default();
        rec.attempts += 1;
        rec.failures += failed as u32;
        rec.sum_distance += d;
        rec.sum_power_dbm += power;
        rec.sum_visible_jam += vis;
        rec.sum_midpoint[0] += mid[0];
        rec.sum_midpoint[1] += mid[1];
    }

    fn draw(&self, packet: &Packet) -> f64 {
        rng::uniform_from_key(rng::derive(
            self.seed,
            &[packet.uid, packet.hops as u64, self.step as u64],
        ))
    }
}

/// Serializes the link map as an ordered list of `[(from, to), record]` pairs.
mod link_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::LinkRecord;

    pub fn serialize<S: Serializer>(m: &BTreeMap<(u16, u16), LinkRecord>, s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<(&(u16, u16), &LinkRecord)> = m.iter().collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(u16, u16), LinkRecord>, D::Error> {
        let v: Vec<((u16, u16), LinkRecord)> = Vec::deserialize(d)?;
        Ok(v.into_iter().collect())
    }
}

pub fn midpoint(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

#[cfg(test)]
mod tests;
