//! Browser front end: a small mesh under the lagged shortest-path router,
//! click-to-place jammers, and the twin calibration walkthrough.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use edgetwin::bench::{calibration_demo, StaticRouter};
use edgetwin::netsim::{Jammer, NetConfig, NetworkState, JAM_LOSS_BUCKETS};
use edgetwin::trainer::TrainConfig;

/// Clicking within this distance of a jammer removes it.
const PICK_RADIUS_M: f64 = 200.0;

#[wasm_bindgen]
pub struct Demo {
    cfg: NetConfig,
    seed: u64,
    state: NetworkState,
    router: StaticRouter,
    delivered: u64,
    generated: u64,
    /// Delivered units per step, most recent last.
    history: Vec<u64>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, nodes: u32) -> Result<Demo, JsError> {
        let cfg = NetConfig {
            n_agents: nodes.clamp(3, 40) as usize,
            ..NetConfig::default()
        };
        cfg.validate().map_err(|e| JsError::new(&e.to_string()))?;
        let state = NetworkState::random(&cfg, seed as u64);
        Ok(Demo {
            cfg,
            seed: seed as u64,
            state,
            router: StaticRouter::new(Some(10)),
            delivered: 0,
            generated: 0,
            history: Vec::new(),
        })
    }

    #[wasm_bindgen(getter)]
    pub fn area(&self) -> f64 {
        self.cfg.area_m
    }

    /// Place a jammer at (x, y) metres, or remove the one already there.
    /// Returns whether a jammer now sits at that spot.
    pub fn toggle_jammer(&mut self, x: f64, y: f64) -> bool {
        let near = self
            .state
            .jammers
            .iter()
            .position(|j| (j.position[0] - x).hypot(j.position[1] - y) < PICK_RADIUS_M);
        match near {
            Some(i) => {
                self.state.jammers.remove(i);
                false
            }
            None => {
                self.state.jammers.push(Jammer {
                    position: [x, y],
                    radius: self.cfg.jammer_radius_m,
                    active: true,
                    affected_channels: (0..self.cfg.n_channels).collect(),
                    loss_multiplier: JAM_LOSS_BUCKETS[JAM_LOSS_BUCKETS.len() - 1],
                    hidden: false,
                });
                true
            }
        }
    }

    /// Advance `steps` steps under the router and return the scene as JSON.
    pub fn run(&mut self, steps: u32) -> Result<String, JsError> {
        for _ in 0..steps {
            let actions = self.router.act(&self.state);
            let out = self.state.step(&actions, &[]).map_err(|e| JsError::new(&e.to_string()))?;
            self.delivered += out.metrics.delivered_units;
            self.generated += out.metrics.generated;
            self.history.push(out.metrics.delivered_units);
        }
        Ok(self.scene().to_string())
    }

    /// Fit the twin's path-loss exponent against a real network whose true
    /// exponent is off by `offset`; one JSON row per sync window.
    pub fn calibrate(&self, offset: f64, rounds: u32) -> Result<String, JsError> {
        let train = TrainConfig {
            net: self.cfg.clone(),
            ..TrainConfig::default()
        };
        let rows = calibration_demo(&train, rounds.clamp(1, 100) as usize, 50, offset, self.seed)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(serde_json::to_string(&rows).map_err(|e| JsError::new(&e.to_string()))?)
    }
}

impl Demo {
    fn scene(&self) -> Value {
        let routes = StaticRouter::compute_routes(&self.state, self.router.max_link_loss);
        let nodes: Vec<Value> = self
            .state
            .nodes
            .iter()
            .map(|n| {
                json!({
                    "x": n.position[0],
                    "y": n.position[1],
                    "alive": n.alive,
                    "queue": n.queue.len(),
                    "gateway": n.id == self.state.gateway,
                    "next": routes.get(n.id),
                })
            })
            .collect();
        let jammers: Vec<Value> = self
            .state
            .jammers
            .iter()
            .map(|j| json!({ "x": j.position[0], "y": j.position[1], "r": j.radius }))
            .collect();
        let recent = &self.history[self.history.len().saturating_sub(120)..];
        json!({
            "step": self.state.step,
            "nodes": nodes,
            "jammers": jammers,
            "delivered": self.delivered,
            "generated": self.generated,
            "recent": recent,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jammer_toggles_and_scene_lists_it() {
        let mut d = Demo::new(1, 10).unwrap();
        assert!(d.toggle_jammer(500.0, 500.0));
        let scene: Value = serde_json::from_str(&d.run(20).unwrap()).unwrap();
        assert_eq!(scene["jammers"].as_array().unwrap().len(), 1);
        assert_eq!(scene["step"], 20);
        assert_eq!(scene["nodes"].as_array().unwrap().len(), d.state.nodes.len());
        assert!(!d.toggle_jammer(550.0, 480.0));
        assert!(d.state.jammers.is_empty());
    }

    #[test]
    fn calibration_rows_carry_the_true_exponent() {
        let d = Demo::new(2, 8).unwrap();
        let rows: Vec<Value> = serde_json::from_str(&d.calibrate(0.3, 3).unwrap()).unwrap();
        assert_eq!(rows.len(), 3);
        let truth = d.cfg.channel.pathloss_exponent + 0.3;
        assert!((rows[0]["exponent_true"].as_f64().unwrap() - truth).abs() < 1e-9);
    }
}
