//! Generative scenario engine: diffusion over interference grids, an
//! autoregressive event model, domain-rule filtering and curriculum weights.

mod curriculum;
mod diffusion;
mod events;
mod generator;
mod scenario;
pub mod synth;

pub use curriculum::{curriculum_resample, ClusterKey, PerformanceRecord};
pub use diffusion::{
    denoiser_input, linear_schedule, DataPrior, noise_loss_grad, sample_grid, time_embedding, train_diffusion, DiffusionConfig,
    DiffusionModel, COND_DIM,
};
pub use events::{
    detokenize, dt_bucket, greedy_tokens, sample_events, tokenize, train_event_model, EventModel, EventModelConfig,
    EventSequence, BOS, DT_BUCKETS, EOS, LOC_SIDE, VOCAB,
};
pub use generator::{GeneratorConfig, ScenarioGenerator};
pub use scenario::{
    assemble_scenario, cell_center, default_jam_channels, feasibility_check, Conditioning, Feasibility, Scenario,
    ScenarioConfig, ScenarioGrid, ScenarioLabel, SCENARIO_FORMAT_VERSION,
};

#[cfg(test)]
mod tests;
