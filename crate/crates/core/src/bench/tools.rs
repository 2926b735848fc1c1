//! Smaller command back ends: the twin calibration walkthrough and scenario
//! generation to disk.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::export::write_csv;
use crate::error::{Error, Result};
use crate::netsim::{Action, NetConfig};
use crate::rng::{seeded, stream};
use crate::scengen::{feasibility_check, GeneratorConfig, ScenarioGenerator, ScenarioLabel};
use crate::trainer::{TrainConfig, Trainer};
use crate::twin::{divergence, RealSnapshot, TwinState};

/// One sync window of the calibration walkthrough.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub round: usize,
    pub step: u32,
    /// Twin/real divergence just before the sync.
    pub divergence_before: f64,
    /// Link-loss gap right after sync and calibration.
    pub loss_gap_after: f64,
    pub exponent_hat: f64,
    pub exponent_true: f64,
    pub links_used: usize,
}

pub const CALIBRATION_HEADER: [&str; 7] = [
    "round",
    "step",
    "divergence_before",
    "loss_gap_after",
    "exponent_hat",
    "exponent_true",
    "links_used",
];

/// Run the real network (whose path-loss exponent is off from nominal by
/// `exponent_offset`) under random probing actions, syncing and calibrating
/// a nominal twin every `window` steps. Random next hops and power levels
/// exercise many link lengths, which the exponent fit needs.
pub fn calibration_demo(
    cfg: &TrainConfig,
    rounds: usize,
    window: u32,
    exponent_offset: f64,
    seed: u64,
) -> Result<Vec<CalibrationRow>> {
    let nominal = Trainer::real_layout(cfg, &mut seeded(seed));
    let mut real = nominal.clone();
    real.channel_params.pathloss_exponent += exponent_offset;
    let mut twin = TwinState::new(&nominal, cfg.twin.clone());
    let heads = real.cfg.action_heads();
    let mut r = stream(seed, "probe", &[]);
    let mut rows = Vec::with_capacity(rounds);
    for round in 0..rounds {
        for _ in 0..window.max(1) {
            let actions: Vec<Action> = (0..real.n_agents())
                .map(|_| Action {
                    next_hop: r.random_range(0..heads[0]),
                    channel: r.random_range(0..heads[1]),
                    power_level: r.random_range(0..heads[2]),
                })
                .collect();
            real.step(&actions, &[])?;
        }
        let before = divergence(&twin, &real)?.total();
        let links = real.take_link_stats();
        let snap = RealSnapshot::capture(&real, &links);
        twin.sync(&snap)?;
        let report = twin.calibrate(&snap);
        rows.push(CalibrationRow {
            round,
            step: real.step,
            divergence_before: before,
            loss_gap_after: divergence(&twin, &real)?.loss_gap,
            exponent_hat: twin.calib.pathloss_exponent_hat,
            exponent_true: real.channel_params.pathloss_exponent,
            links_used: report.links_used,
        });
    }
    Ok(rows)
}

pub fn write_calibration(path: &Path, rows: &[CalibrationRow]) -> Result<()> {
    write_csv(path, &CALIBRATION_HEADER, rows)
}

/// Per-scenario summary written next to the scenario files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub index: usize,
    pub label: ScenarioLabel,
    pub events: usize,
    pub standing_jammers: usize,
    pub load_multiplier: f64,
    pub adversarial: bool,
    pub feasible: bool,
}

pub const SCENARIO_HEADER: [&str; 7] = [
    "index",
    "label",
    "events",
    "standing_jammers",
    "load_multiplier",
    "adversarial",
    "feasible",
];

/// Train the generator on its synthetic corpora and write `n` scenarios to
/// `out/scenarios/`, with `out/scenarios.csv` summarizing them.
pub fn generate_scenarios(
    gen: &GeneratorConfig,
    net: &NetConfig,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<ScenarioStats>> {
    let g = ScenarioGenerator::train(gen, &mut stream(seed, "genai", &[]))?;
    let pool = g.generate_pool(n, net, &mut stream(seed, "pool", &[]))?;
    let dir = out.join("scenarios");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut stats = Vec::with_capacity(n);
    for (index, s) in pool.iter().enumerate() {
        s.save(&dir.join(format!("scenario_{index:04}.json")))?;
        stats.push(ScenarioStats {
            index,
            label: s.label,
            events: s.events.len(),
            standing_jammers: s.standing_jammers(&gen.scenario, net).len(),
            load_multiplier: s.load_multiplier,
            adversarial: s.is_adversarial(&gen.scenario),
            feasible: feasibility_check(s, &gen.scenario, net).is_accept(),
        });
    }
    write_csv(&out.join("scenarios.csv"), &SCENARIO_HEADER, &stats)?;
    Ok(stats)
}
