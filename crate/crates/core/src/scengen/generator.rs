use rand::Rng;
use serde::{Deserialize, Serialize};

use super::diffusion::{train_diffusion, DiffusionConfig, DiffusionModel};
use super::events::{sample_events, train_event_model, EventModel, EventModelConfig};
use super::scenario::{assemble_scenario, Conditioning, Scenario, ScenarioConfig};
use super::synth::{event_corpus, interference_corpus};
use crate::error::Result;
use crate::netsim::NetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub diffusion: DiffusionConfig,
    pub events: EventModelConfig,
    pub grid_corpus: usize,
    pub event_corpus: usize,
    pub max_events: usize,
    pub temperature: f64,
    /// Load multiplier per load class.
    pub load_levels: [f64; 3],
    pub scenario: ScenarioConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            diffusion: DiffusionConfig::default(),
            events: EventModelConfig::default(),
            grid_corpus: 1000,
            event_corpus: 400,
            max_events: 6,
            temperature: 1.0,
            load_levels: [0.8, 1.0, 1.4],
            scenario: ScenarioConfig::default(),
        }
    }
}

/// Trained grid and event generators plus the assembly rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGenerator {
    pub cfg: GeneratorConfig,
    pub diffusion: DiffusionModel,
    pub events: EventModel,
}

impl ScenarioGenerator {
    /// Synthesize both training corpora and fit the two models.
    pub fn train(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        let (grids, _) = interference_corpus(cfg.grid_corpus, cfg.diffusion.grid, rng);
        let diffusion = train_diffusion(&grids, &cfg.diffusion, rng)?;
        let corpus = event_corpus(
            cfg.event_corpus,
            cfg.events.grid,
            cfg.scenario.horizon,
            cfg.max_events,
            rng,
        );
        let events = train_event_model(&corpus, &cfg.events, rng)?;
        Ok(ScenarioGenerator {
            cfg: cfg.clone(),
            diffusion,
            events,
        })
    }

    fn draw(&self, c: Conditioning, rng: &mut impl Rng) -> Result<(super::ScenarioGrid, Vec<crate::netsim::Event>, f64)> {
        let grid = self.diffusion.sample_batch(&[c], rng).pop().expect("one grid");
        let events = sample_events(&self.events, c, &[], self.cfg.scenario.horizon.saturating_sub(1), self.cfg.temperature, rng)?;
        Ok((grid, events, self.cfg.load_levels[(c.load as usize).min(2)]))
    }

    /// One feasible generated scenario for the given conditioning.
    pub fn generate(&self, c: Conditioning, net: &NetConfig, rng: &mut impl Rng) -> Result<Scenario> {
        let (grid, events, load) = self.draw(c, rng)?;
        let mut retry_err = None;
        let s = assemble_scenario(grid, events, load, &self.cfg.scenario, net, |_| match self.draw(c, rng) {
            Ok(d) => Some(d),
            Err(e) => {
                retry_err = Some(e);
                None
            }
        });
        match (s, retry_err) {
            (Ok(s), _) => Ok(s),
            (Err(_), Some(e)) => Err(e),
            (Err(e), None) => Err(e),
        }
    }

    /// `n` feasible scenarios with uniformly drawn conditioning.
    pub fn generate_pool(&self, n: usize, net: &NetConfig, rng: &mut impl Rng) -> Result<Vec<Scenario>> {
        (0..n)
            .map(|_| {
                let c = Conditioning {
                    jam: rng.random_range(0..3),
                    load: rng.random_range(0..3),
                };
                self.generate(c, net, rng)
            })
            .collect()
    }
}
