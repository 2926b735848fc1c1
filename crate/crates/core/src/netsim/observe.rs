use serde::{Deserialize, Serialize};

use super::{NetConfig, NetworkState};

/// SNR encoding: `(snr_db - SNR_FLOOR_DB) / SNR_SCALE_DB`, clamped to [0, 1.5].
pub const SNR_FLOOR_DB: f64 = -10.0;
pub const SNR_SCALE_DB: f64 = 30.0;

/// Fixed-length local observation of one agent.
///
/// Layout: own alive flag; per neighbor slot (SNR, alive, progress toward the
/// gateway, queue fill); gateway SNR and normalized distance; own queue fill;
/// recent success rate; channel one-hot; jam-detect flag; power level. With
/// `global_view` every agent's queue fill and alive flag follow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

pub fn observation_dim(cfg: &NetConfig) -> usize {
    let base = 1 + 4 * cfg.k_neighbors + 2 + 1 + 1 + cfg.n_channels + 1 + 1;
    if cfg.global_view {
        base + 2 * cfg.n_agents
    } else {
        base
    }
}

fn encode_snr(snr: f64) -> f64 {
    ((snr - SNR_FLOOR_DB) / SNR_SCALE_DB).clamp(0.0, 1.5)
}

impl NetworkState {
    /// Observation of agent `node`. Dead agents observe the zero vector.
    pub fn observe(&self, node: usize) -> Observation {
        let cfg = &self.cfg;
        let mut v = vec![0.0; observation_dim(cfg)];
        let me = &self.nodes[node];
        if me.alive {
            let gw = &self.nodes[self.gateway];
            let area = cfg.area_m;
            let my_gw_dist = me.distance_to(gw);
            let cap = cfg.queue_capacity as f64;
            let power = self.channel_params.tx_power(me.power_level);
            let mut o = 0;
            v[o] = 1.0;
            o += 1;
            let neigh = self.neighbors(node);
            for slot in 0..cfg.k_neighbors {
                if let Some(&j) = neigh.get(slot) {
                    let nj = &self.nodes[j];
                    if nj.alive {
                        v[o] = encode_snr(self.channel_params.snr_db(power, me.distance_to(nj)));
                        v[o + 1] = 1.0;
                        v[o + 2] = ((my_gw_dist - nj.distance_to(gw)) / area).clamp(-1.0, 1.0);
                        v[o + 3] = nj.queue.len() as f64 / cap;
                    }
                }
                o += 4;
            }
            v[o] = encode_snr(self.channel_params.snr_db(power, my_gw_dist));
            v[o + 1] = (my_gw_dist / area).min(1.5);
            v[o + 2] = me.queue.len() as f64 / cap;
            v[o + 3] = me.recent_success;
            o += 4;
            v[o + me.channel.min(cfg.n_channels - 1)] = 1.0;
            o += cfg.n_channels;
            v[o] = (1.0 - me.recent_success > cfg.jam_detect_threshold) as u8 as f64;
            let levels = self.channel_params.tx_power_table.len();
            v[o + 1] = if levels > 1 {
                me.power_level as f64 / (levels - 1) as f64
            } else {
                0.0
            };
            o += 2;
            if cfg.global_view {
                for n in &self.nodes[..self.gateway] {
                    v[o] = n.queue.len() as f64 / cap;
                    v[o + 1] = n.alive as u8 as f64;
                    o += 2;
                }
            }
            debug_assert_eq!(o, v.len());
        }
        Observation(v)
    }

    /// Index of the jam-detect entry in an observation vector.
    pub fn jam_detect_index(cfg: &NetConfig) -> usize {
        1 + 4 * cfg.k_neighbors + 4 + cfg.n_channels
    }
}
