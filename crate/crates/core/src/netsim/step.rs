use serde::{Deserialize, Serialize};

use super::{Event, EventKind, NetworkState, Packet, StepMetrics, Surge};
use crate::error::{Error, Result};

/// One agent's decision for a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    /// Index into the node's neighbor list; `k_neighbors` means gateway-direct.
    pub next_hop: usize,
    pub channel: usize,
    pub power_level: usize,
}

pub struct StepOutput {
    pub observations: Vec<super::Observation>,
    pub rewards: Vec<f64>,
    pub metrics: StepMetrics,
}

impl NetworkState {
    /// Apply a due event. Returns the number of queued units discarded.
    pub fn apply_event(&mut self, event: &Event) -> Result<usize> {
        if event.time != self.step {
            return Err(Error::EventNotDue {
                event_time: event.time,
                state_step: self.step,
            });
        }
        let unknown = |what: &str| Error::UnknownEntity(format!("{what} {:?}", event.target));
        match event.kind {
            EventKind::JammerOn | EventKind::JammerOff => {
                let j = event
                    .target
                    .and_then(|t| self.jammers.get_mut(t))
                    .ok_or_else(|| unknown("jammer"))?;
                j.active = event.kind == EventKind::JammerOn;
                Ok(0)
            }
            EventKind::NodeFail | EventKind::NodeRecover => {
                let t = event
                    .target
                    .filter(|&t| t < self.nodes.len())
                    .ok_or_else(|| unknown("node"))?;
                if t == self.gateway {
                    return Err(Error::Config("the gateway cannot fail or recover".into()));
                }
                let node = &mut self.nodes[t];
                let discarded = node.queue.len();
                node.queue.clear();
                node.load_credit = 0.0;
                node.alive = event.kind == EventKind::NodeRecover;
                if node.alive {
                    node.recent_success = 1.0;
                    Ok(0)
                } else {
                    Ok(discarded)
                }
            }
            EventKind::TrafficSurge => {
                let factor = event.surge_factor();
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(Error::Config(format!("invalid surge factor {factor}")));
                }
                self.surges.push(Surge {
                    factor,
                    until: self.step + event.duration.unwrap_or(1),
                });
                Ok(0)
            }
        }
    }

    /// Advance the simulation by one step.
    ///
    /// Phases, in order:
    /// 1. apply `due_events`
    /// 2. move agents by their velocity, reflecting at the area boundary
    /// 3. every alive agent generates its offered load
    /// 4. every alive agent (ascending id) sends up to `service_rate`
    ///    head-of-queue packets to its chosen next hop; each transmission
    ///    succeeds with probability `1 - loss`; failures are dropped at the sender
    /// 5. packets reaching the gateway are delivered with latency
    ///    `(step - created_step + 1) * step_duration` (ms)
    /// 6. relayed packets join the receiver's queue; TTL-expired and overflowing
    ///    packets are dropped at the receiver
    /// 7. observations, rewards and metrics are computed and the clock advances
    ///
    /// `actions` holds one entry per agent; entries of dead agents are ignored.
    pub fn step(&mut self, actions: &[Action], due_events: &[Event]) -> Result<StepOutput> {
        let n_agents = self.n_agents();
        if actions.len() != n_agents {
            return Err(Error::ActionShape {
                expected: n_agents,
                got: actions.len(),
            });
        }
        let heads = self.cfg.action_heads();
        for a in actions {
            if a.next_hop >= heads[0] || a.channel >= heads[1] || a.power_level >= heads[2] {
                return Err(Error::ActionShape {
                    expected: n_agents,
                    got: actions.len(),
                });
            }
        }
        let mut m = StepMetrics::new(self.nodes.len());

        // 1. events
        for ev in due_events {
            let discarded = self.apply_event(ev)?;
            if let Some(t) = ev.target.filter(|_| discarded > 0) {
                m.dropped_units += discarded as u64;
                m.per_node_dropped[t] += discarded as u64;
            }
        }
        self.surges.retain(|s| s.until > self.step);

        // 2. mobility
        let area = self.cfg.area_m;
        for node in self.nodes[..n_agents].iter_mut().filter(|n| n.alive) {
            for ax in 0..2 {
                let mut p = node.position[ax] + node.velocity[ax];
                if p < 0.0 {
                    p = -p;
                    node.velocity[ax] = -node.velocity[ax];
                } else if p > area {
                    p = 2.0 * area - p;
                    node.velocity[ax] = -node.velocity[ax];
                }
                node.position[ax] = p.clamp(0.0, area);
            }
        }

        // 3. generation
        let load = self.effective_load();
        let cap = self.cfg.queue_capacity;
        for i in 0..n_agents {
            if !self.nodes[i].alive {
                continue;
            }
            self.nodes[i].load_credit += load;
            while self.nodes[i].load_credit >= 1.0 {
                self.nodes[i].load_credit -= 1.0;
                m.generated += 1;
                m.per_node_generated[i] += 1;
                let uid = self.next_packet_uid;
                self.next_packet_uid += 1;
                if self.nodes[i].queue.len() < cap {
                    self.nodes[i].queue.push_back(Packet {
                        uid,
                        origin: i,
                        created_step: self.step,
                        hops: 0,
                        path: Vec::new(),
                    });
                } else {
                    m.dropped_units += 1;
                    m.per_node_dropped[i] += 1;
                }
            }
        }

        // 4-5. forwarding and delivery
        let neighbor_lists: Vec<Vec<usize>> = (0..n_agents).map(|i| self.neighbors(i)).collect();
        let ms_per_step = self.step_duration * 1000.0;
        let ema = self.cfg.success_ema;
        let mut staged: Vec<(usize, Packet)> = Vec::new();
        for i in 0..n_agents {
            if !self.nodes[i].alive {
                continue;
            }
            let a = actions[i];
            self.nodes[i].channel = a.channel;
            self.nodes[i].power_level = a.power_level;
            let target = self.resolve_next_hop(a.next_hop, &neighbor_lists[i]);
            for _ in 0..self.cfg.service_rate {
                let Some(mut pkt) = self.nodes[i].queue.pop_front() else {
                    break;
                };
                if !self.nodes[target].alive {
                    m.dropped_units += 1;
                    m.per_node_dropped[i] += 1;
                    continue;
                }
                let loss = self.compose(
                    self.snr_between(&self.nodes[i], &self.nodes[target]),
                    &self.nodes[i],
                    &self.nodes[target],
                );
                let ok = self.draw(&pkt) >= loss;
                self.record_attempt(i, target, !ok);
                let node = &mut self.nodes[i];
                node.recent_success = (1.0 - ema) * node.recent_success + ema * (ok as u8 as f64);
                if !ok {
                    m.dropped_units += 1;
                    m.per_node_dropped[i] += 1;
                    continue;
                }
                pkt.hops += 1;
                pkt.path.push(i as u16);
                if target == self.gateway {
                    let latency = (self.step - pkt.created_step + 1) as f64 * ms_per_step;
                    m.delivered_units += 1;
                    m.sum_latency_ms += latency;
                    m.per_node_delivered[pkt.origin] += 1;
                    let share = 1.0 / pkt.path.len() as f64;
                    for &hop in &pkt.path {
                        m.per_node_credit[hop as usize] += share;
                    }
                } else {
                    staged.push((target, pkt));
                }
            }
        }

        // 6. relay arrivals
        let ttl = self.cfg.ttl;
        for (target, pkt) in staged {
            if pkt.hops >= ttl || self.nodes[target].queue.len() >= cap {
                m.dropped_units += 1;
                m.per_node_dropped[target] += 1;
            } else {
                self.nodes[target].queue.push_back(pkt);
            }
        }

        // 7. accounting
        m.queued_after = self.queued_units() as u64;
        let alive_agents = self.nodes[..n_agents].iter().filter(|n| n.alive).count();
        m.mean_queue = if alive_agents == 0 {
            0.0
        } else {
            self.nodes[..n_agents]
                .iter()
                .filter(|n| n.alive)
                .map(|n| n.queue.len() as f64)
                .sum::<f64>()
                / alive_agents as f64
        };
        let rewards = (0..n_agents).map(|i| self.reward(&m, i)).collect();
        let observations = (0..n_agents).map(|i| self.observe(i)).collect();
        self.step += 1;
        Ok(StepOutput {
            observations,
            rewards,
            metrics: m,
        })
    }

    /// Per-agent reward for the step that produced `metrics`:
    /// `w_thr * credit - w_lat * queue_fill - w_drop * drops + w_global * delivered/generated`.
    ///
    /// A delivered unit credits each node on its path with `1 / hops`, so one
    /// delivery is worth one unit in total. Dead agents receive 0.
    pub fn reward(&self, metrics: &StepMetrics, node: usize) -> f64 {
        let n = &self.nodes[node];
        if !n.alive || node == self.gateway {
            return 0.0;
        }
        let w = &self.cfg.reward;
        let global = if metrics.generated > 0 {
            metrics.delivered_units as f64 / metrics.generated as f64
        } else {
            0.0
        };
        w.throughput * metrics.per_node_credit[node]
            - w.latency * (n.queue.len() as f64 / self.cfg.queue_capacity as f64)
            - w.drop * metrics.per_node_dropped[node] as f64
            + w.global * global
    }
}
