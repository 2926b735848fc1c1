//! Digital twin: a mirrored network state kept in step with the real
//! instance, calibrated from measured link losses, and used for rollouts.

mod rollout;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use rollout::{predictive_rollout, run_episode, run_policy_episode, Episode, Rollout, RolloutOptions};

use crate::error::{Error, Result};
use crate::netsim::{
    compose_loss, dist, BiasGrid, Event, EventKind, Jammer, LinkRecord, NetworkState, Packet, Surge,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Periodic,
    EventTriggered,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivergenceWeights {
    pub position: f64,
    pub alive: f64,
    pub queue: f64,
    pub loss_gap: f64,
}

impl Default for DivergenceWeights {
    fn default() -> Self {
        DivergenceWeights {
            position: 1.0,
            alive: 1.0,
            queue: 0.5,
            loss_gap: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    pub sync_interval: u32,
    pub sync_mode: SyncMode,
    pub grid_cells: usize,
    pub ema_alpha: f64,
    /// Usable measurements required before the path-loss exponent is refit.
    pub min_links: usize,
    /// Per-window decay of the exponent fit's accumulated statistics.
    pub fit_decay: f64,
    pub fit_exponent: bool,
    pub staleness_bound: u32,
    pub weights: DivergenceWeights,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            sync_interval: 10,
            sync_mode: SyncMode::Both,
            grid_cells: 8,
            ema_alpha: 0.2,
            min_links: 5,
            fit_decay: 0.9,
            fit_exponent: true,
            staleness_bound: 20,
            weights: DivergenceWeights::default(),
        }
    }
}

impl TwinConfig {
    /// Whether the outer loop should sync after real step `step` given the
    /// events that fired during it.
    pub fn should_sync(&self, step: u32, events: &[Event]) -> bool {
        let periodic = self.sync_interval > 0 && step % self.sync_interval == 0;
        let triggered = events
            .iter()
            .any(|e| matches!(e.kind, EventKind::NodeFail | EventKind::JammerOn));
        match self.sync_mode {
            SyncMode::Periodic => periodic,
            SyncMode::EventTriggered => triggered,
            SyncMode::Both => periodic || triggered,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub pathloss_exponent_hat: f64,
    pub noise_floor_hat: f64,
    pub bias: BiasGrid,
    pub ema_alpha: f64,
    /// Decayed least-squares sums `(sum x*y, sum x*x)` of the exponent fit.
    pub fit_sums: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub alive: bool,
    pub queue_len: usize,
    pub channel: usize,
    pub power_level: usize,
    pub recent_success: f64,
    pub load_credit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMeasurement {
    pub from: usize,
    pub to: usize,
    pub attempts: u32,
    pub loss_rate: f64,
    pub mean_distance: f64,
    pub mean_power_dbm: f64,
    /// Loss multiplier of jammers the real side can see (reported ones).
    pub mean_visible_jam: f64,
    pub midpoint: [f64; 2],
}

/// What the real side reports at a sync point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealSnapshot {
    pub step: u32,
    pub nodes: Vec<NodeStatus>,
    pub links: Vec<LinkMeasurement>,
    pub offered_load: f64,
    pub load_multiplier: f64,
    pub surges: Vec<Surge>,
    /// Reported jammers; hidden interferers never appear here.
    pub visible_jammers: Vec<Jammer>,
    pub next_packet_uid: u64,
}

impl RealSnapshot {
    /// Observe `real` without touching it; `links` is the telemetry window
    /// drained from the real instance.
    pub fn capture(real: &NetworkState, links: &BTreeMap<(u16, u16), LinkRecord>) -> Self {
        RealSnapshot {
            step: real.step,
            nodes: real
                .nodes
                .iter()
                .map(|n| NodeStatus {
                    position: n.position,
                    velocity: n.velocity,
                    alive: n.alive,
                    queue_len: n.queue.len(),
                    channel: n.channel,
                    power_level: n.power_level,
                    recent_success: n.recent_success,
                    load_credit: n.load_credit,
                })
                .collect(),
            links: links
                .iter()
                .filter(|(_, r)| r.attempts > 0)
                .map(|(&(a, b), r)| LinkMeasurement {
                    from: a as usize,
                    to: b as usize,
                    attempts: r.attempts,
                    loss_rate: r.loss_rate(),
                    mean_distance: r.mean(r.sum_distance),
                    mean_power_dbm: r.mean(r.sum_power_dbm),
                    mean_visible_jam: r.mean(r.sum_visible_jam),
                    midpoint: [r.mean(r.sum_midpoint[0]), r.mean(r.sum_midpoint[1])],
                })
                .collect(),
            offered_load: real.offered_load,
            load_multiplier: real.load_multiplier,
            surges: real.surges.clone(),
            visible_jammers: real.jammers.iter().filter(|j| !j.hidden).cloned().collect(),
            next_packet_uid: real.next_packet_uid,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub links_used: usize,
    pub cells_updated: usize,
    pub exponent_refit: bool,
    /// Set when the window held no usable measurement.
    pub insufficient_data: bool,
}

/// Per-term breakdown of [`divergence`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub position: f64,
    pub alive: f64,
    pub queue: f64,
    pub loss_gap: f64,
}

impl Divergence {
    pub fn total(&self) -> f64 {
        self.position + self.alive + self.queue + self.loss_gap
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub mirror: NetworkState,
    pub calib: CalibrationParams,
    pub last_sync_step: u32,
    pub cfg: TwinConfig,
}

impl TwinState {
    /// Twin built from an initial copy of the world, with the nominal channel
    /// model and an empty bias grid.
    pub fn new(initial: &NetworkState, cfg: TwinConfig) -> Self {
        let mut mirror = initial.clone();
        mirror.link_stats.clear();
        let area = mirror.cfg.area_m;
        let bias = BiasGrid::zeros(cfg.grid_cells, area);
        mirror.loss_bias = Some(bias.clone());
        TwinState {
            calib: CalibrationParams {
                pathloss_exponent_hat: mirror.channel_params.pathloss_exponent,
                noise_floor_hat: mirror.channel_params.noise_floor_dbm,
                bias,
                ema_alpha: cfg.ema_alpha,
                fit_sums: (0.0, 0.0),
            },
            last_sync_step: mirror.step,
            mirror,
            cfg,
        }
    }

    /// Overwrite the mirror's dynamic state from the snapshot. Calibration is
    /// left alone.
    pub fn sync(&mut self, snap: &RealSnapshot) -> Result<()> {
        if snap.step < self.last_sync_step {
            return Err(Error::StaleSync {
                snapshot: snap.step,
                last_sync: self.last_sync_step,
            });
        }
        if snap.nodes.len() != self.mirror.nodes.len() {
            return Err(Error::NodeCountMismatch(self.mirror.nodes.len(), snap.nodes.len()));
        }
        let m = &mut self.mirror;
        for (i, (n, s)) in m.nodes.iter_mut().zip(&snap.nodes).enumerate() {
            n.position = s.position;
            n.velocity = s.velocity;
            n.alive = s.alive;
            n.channel = s.channel;
            n.power_level = s.power_level;
            n.recent_success = s.recent_success;
            n.load_credit = s.load_credit;
            // Keep mirrored packets when the length already agrees.
            n.queue.truncate(s.queue_len);
            while n.queue.len() < s.queue_len {
                n.queue.push_back(Packet {
                    uid: u64::MAX - (i as u64) * 1_000_000 - n.queue.len() as u64,
                    origin: i,
                    created_step: snap.step,
                    hops: 0,
                    path: Vec::new(),
                });
            }
        }
        m.offered_load = snap.offered_load;
        m.load_multiplier = snap.load_multiplier;
        m.surges = snap.surges.clone();
        m.jammers = snap.visible_jammers.clone();
        m.next_packet_uid = snap.next_packet_uid;
        m.step = snap.step;
        self.last_sync_step = snap.step;
        Ok(())
    }

    /// Twin loss prediction for a measured link without the bias term.
    fn base_prediction(&self, l: &LinkMeasurement) -> f64 {
        let p = &self.mirror.channel_params;
        let snr = l.mean_power_dbm - (p.reference_loss_db + 10.0 * self.calib.pathloss_exponent_hat * l.mean_distance.max(1.0).log10())
            - self.calib.noise_floor_hat;
        compose_loss(&p.snr_loss_curve, snr, l.mean_visible_jam, 0.0)
    }

    /// Move bias cells toward the measured-minus-predicted residual and refit
    /// the path-loss exponent from the window's measurements.
    pub fn calibrate(&mut self, snap: &RealSnapshot) -> CalibrationReport {
        let mut report = CalibrationReport::default();
        let usable: Vec<&LinkMeasurement> = snap.links.iter().filter(|l| l.attempts > 0).collect();
        if usable.is_empty() {
            report.insufficient_data = true;
            return report;
        }
        report.links_used = usable.len();

        if self.cfg.fit_exponent {
            let p = &self.mirror.channel_params;
            let decay = self.cfg.fit_decay;
            let (mut sxy, mut sxx) = (self.calib.fit_sums.0 * decay, self.calib.fit_sums.1 * decay);
            let mut n_fit = 0;
            for l in &usable {
                if l.mean_visible_jam > 0.0 || !(0.05..=0.95).contains(&l.loss_rate) || l.attempts < 5 {
                    continue;
                }
                let Some(snr) = p.snr_loss_curve.invert(l.loss_rate) else {
                    continue;
                };
                let x = 10.0 * l.mean_distance.max(1.0).log10();
                let y = l.mean_power_dbm - p.reference_loss_db - self.calib.noise_floor_hat - snr;
                let w = l.attempts as f64;
                sxy += w * x * y;
                sxx += w * x * x;
                n_fit += 1;
            }
            self.calib.fit_sums = (sxy, sxx);
            if n_fit >= self.cfg.min_links && sxx > 0.0 {
                self.calib.pathloss_exponent_hat = (sxy / sxx).clamp(1.5, 5.0);
                report.exponent_refit = true;
            }
        }

        let cells = self.calib.bias.cells * self.calib.bias.cells;
        let mut sum = vec![0.0; cells];
        let mut weight = vec![0.0; cells];
        for l in &usable {
            let c = self.calib.bias.cell_of(l.midpoint);
            let w = l.attempts as f64;
            sum[c] += w * (l.loss_rate - self.base_prediction(l));
            weight[c] += w;
        }
        let a = self.calib.ema_alpha;
        for c in 0..cells {
            if weight[c] > 0.0 {
                let target = sum[c] / weight[c];
                let v = &mut self.calib.bias.values[c];
                *v = ((1.0 - a) * *v + a * target).clamp(-0.5, 0.5);
                report.cells_updated += 1;
            }
        }
        self.apply_calibration();
        report
    }

    /// Push calibration parameters into the mirror's channel model.
    pub fn apply_calibration(&mut self) {
        self.mirror.channel_params.pathloss_exponent = self.calib.pathloss_exponent_hat;
        self.mirror.channel_params.noise_floor_dbm = self.calib.noise_floor_hat;
        self.mirror.loss_bias = Some(self.calib.bias.clone());
    }
}

/// Weighted mismatch between the mirror and the true state.
///
/// position: sum over nodes of displacement / area; alive: count of flag
/// mismatches; queue: sum of |queue difference| / capacity; loss gap: mean
/// |twin - real| loss over every alive agent's links to its neighbours and the
/// gateway (on its current channel and power).
pub fn divergence(twin: &TwinState, real: &NetworkState) -> Result<Divergence> {
    let m = &twin.mirror;
    if m.nodes.len() != real.nodes.len() {
        return Err(Error::NodeCountMismatch(m.nodes.len(), real.nodes.len()));
    }
    let w = &twin.cfg.weights;
    let area = real.cfg.area_m;
    let cap = real.cfg.queue_capacity as f64;
    let mut d = Divergence::default();
    for (a, b) in m.nodes.iter().zip(&real.nodes) {
        d.position += dist(a.position, b.position) / area;
        d.alive += (a.alive != b.alive) as u8 as f64;
        d.queue += (a.queue.len() as f64 - b.queue.len() as f64).abs() / cap;
    }
    let (mut gap, mut links) = (0.0, 0usize);
    for i in 0..real.n_agents() {
        if !real.nodes[i].alive || !m.nodes[i].alive {
            continue;
        }
        let mut targets = real.neighbors(i);
        targets.push(real.gateway);
        for j in targets {
            if let (Ok(r), Ok(t)) = (real.link_loss(i, j), m.link_loss(i, j)) {
                gap += (r - t).abs();
                links += 1;
            }
        }
    }
    if links > 0 {
        d.loss_gap = gap / links as f64;
    }
    d.position *= w.position;
    d.alive *= w.alive;
    d.queue *= w.queue;
    d.loss_gap *= w.loss_gap;
    Ok(d)
}

#[cfg(test)]
mod tests;
