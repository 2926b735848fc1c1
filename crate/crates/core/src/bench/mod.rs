//! Experiment harness: presets, baseline runs, evaluation and export.

pub mod eval;
pub mod experiment;
pub mod export;
pub mod tools;


pub use eval::{case_study, jam_eval, run_strategy, CaseStudyResult, EvalConfig, JamEval, StaticRouter, Strategy, StrategyTotals, TimePoint, STRESS_WINDOW};
pub use experiment::{
    load_policy, run_ablation, run_case_study, run_experiment, run_experiment_runs, save_policy, ConfigFile, ExperimentConfig, Preset, SeedRun,
    CASE_STRATEGIES,
};
pub use export::{AggregateRow, CurveRow, Manifest, ResultTable, SeedRow};
pub use tools::{calibration_demo, generate_scenarios, CalibrationRow, ScenarioStats};
