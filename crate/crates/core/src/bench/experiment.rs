//! Presets, experiment configs with overrides, and the per-seed run loop.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::eval::{case_study, jam_eval, CaseStudyResult, EvalConfig, Strategy, StrategyTotals};
use super::export::{
    curve_rows, sha256_hex, write_csv, write_learning_curve, write_summary, write_timeseries, Manifest, ResultTable,
    SeedRow,
};
use crate::agent::Checkpoint;
use crate::error::{Error, Result};
use crate::fed::append_round_log;
use crate::netsim::NetworkState;
use crate::rng::seeded;
use crate::scengen::Scenario;
use crate::trainer::{
    convergence_episode, episodes_to_fraction, final_smoothed, run_training, Baseline, DeployedPolicy, TrainConfig,
    TrainOutcome, Trainer,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    PaperFull,
    #[default]
    DeskSmall,
    CaseStudy,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::PaperFull, Preset::DeskSmall, Preset::CaseStudy];

    pub fn name(self) -> &'static str {
        match self {
            Preset::PaperFull => "paper_full",
            Preset::DeskSmall => "desk_small",
            Preset::CaseStudy => "case_study",
        }
    }

    /// Training config for `baseline` under this preset.
    pub fn train_config(self, baseline: Baseline) -> TrainConfig {
        let mut cfg = TrainConfig::default().with_baseline(baseline);
        match self {
            Preset::DeskSmall | Preset::CaseStudy => {
                cfg.net.n_agents = 8;
                cfg.net.area_m = 2500.0;
                cfg.iterations = 300;
            }
            Preset::PaperFull => {
                cfg.net.n_agents = 20;
                cfg.net.area_m = 4000.0;
                cfg.iterations = 1000;
                cfg.hyper.actor_hidden = vec![64, 64];
                cfg.hyper.critic_hidden = vec![128, 128];
                cfg.buffer_capacity = 50_000;
            }
        }
        cfg.real_steps_per_iter = 100;
        cfg.episode_len = 100;
        cfg
    }

    pub fn seeds(self) -> Vec<u64> {
        match self {
            Preset::PaperFull => (0..5).collect(),
            Preset::DeskSmall => vec![0, 1, 2],
            Preset::CaseStudy => vec![0],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

/// One experiment: a preset, a baseline, seeds, where to write, and
/// overrides on top of the preset.
///
/// Override keys are paths into the training config (`iterations`,
/// `net.n_agents`, `hyper.critic_lr`); keys under `eval.` go to the
/// evaluation config instead. Nested tables and dotted keys mix freely.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub baseline: Baseline,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub overrides: Map<String, Value>,
}

/// The on-disk form of [`ExperimentConfig`]; every field is optional so the
/// command line can fill the gaps.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub baseline: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

impl ExperimentConfig {
    pub fn new(preset: Preset, baseline: Baseline, out: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            preset,
            baseline,
            seeds: preset.seeds(),
            out: out.into(),
            overrides: Map::new(),
        }
    }

    /// Build from a config file; names are checked here, before any run.
    pub fn from_file(file: &ConfigFile, out: impl Into<PathBuf>) -> Result<Self> {
        let preset: Preset = file.preset.as_deref().unwrap_or("desk_small").parse()?;
        let baseline: Baseline = file.baseline.as_deref().unwrap_or("edgeagentx_dt").parse()?;
        let mut cfg = ExperimentConfig::new(preset, baseline, file.out.clone().unwrap_or_else(|| out.into()));
        if let Some(s) = &file.seeds {
            cfg.seeds = s.clone();
        }
        cfg.overrides = file.overrides.clone();
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.overrides.insert(key.to_string(), value.into());
        self
    }

    pub fn with_baseline(&self, baseline: Baseline, out: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            baseline,
            out: out.into(),
            ..self.clone()
        }
    }

    /// Preset defaults with the overrides applied.
    pub fn resolve(&self) -> Result<(TrainConfig, EvalConfig)> {
        let mut train = to_value(&self.preset.train_config(self.baseline))?;
        let mut eval = to_value(&EvalConfig::default())?;
        for (key, value) in &self.overrides {
            match key.strip_prefix("eval.") {
                Some(rest) => apply_override(&mut eval, rest, value, key)?,
                None if key == "eval" => merge_table(&mut eval, value, key)?,
                None => apply_override(&mut train, key, value, key)?,
            }
        }
        let train: TrainConfig = serde_json::from_value(train).map_err(|e| Error::Config(e.to_string()))?;
        let eval: EvalConfig = serde_json::from_value(eval).map_err(|e| Error::Config(e.to_string()))?;
        train.validate()?;
        Ok((train, eval))
    }

    /// Digest of the preset, baseline, overrides and the configs they
    /// resolve to. Seeds and the output directory are recorded separately.
    pub fn config_hash(&self) -> Result<String> {
        let (train, eval) = self.resolve()?;
        let doc = json!({
            "preset": self.preset.name(),
            "baseline": self.baseline.name(),
            "overrides": self.overrides,
            "train": train,
            "eval": eval,
        });
        Ok(sha256_hex(doc.to_string().as_bytes()))
    }

    fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Set `path` (dot-separated) inside `doc`. Every segment must already exist
/// so a typo fails instead of being ignored.
fn apply_override(doc: &mut Value, path: &str, value: &Value, key: &str) -> Result<()> {
    let mut cur = doc;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let Value::Object(map) = cur else {
            return Err(Error::Config(format!("override {key}: {part} is not a table")));
        };
        let Some(slot) = map.get_mut(part) else {
            return Err(Error::Config(format!("unknown override key {key}")));
        };
        if parts.peek().is_none() {
            return if slot.is_object() && value.is_object() {
                merge_table(slot, value, key)
            } else {
                *slot = value.clone();
                Ok(())
            };
        }
        cur = slot;
    }
    Ok(())
}

fn merge_table(slot: &mut Value, value: &Value, key: &str) -> Result<()> {
    let Value::Object(fields) = value else {
        return Err(Error::Config(format!("override {key} must be a table")));
    };
    for (k, v) in fields {
        apply_override(slot, k, v, &format!("{key}.{k}"))?;
    }
    Ok(())
}

/// Episode count (iterations) at which the smoothed return reaches 95% of
/// its final value.
pub const TARGET_FRACTION: f64 = 0.95;

/// Everything one seed produced.
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub row: SeedRow,
}

pub fn seed_row(baseline: Baseline, seed: u64, out: &TrainOutcome, eval: &EvalConfig) -> Result<SeedRow> {
    let curve = out.learning_curve();
    let jam = jam_eval(&Strategy::Learned(&out.policy), &out.real_base, eval)?;
    let aggregations: Vec<_> = out.records.iter().filter_map(|r| r.aggregation.as_ref()).collect();
    Ok(SeedRow {
        baseline: baseline.name().to_string(),
        seed,
        final_return: final_smoothed(&curve, eval.window),
        convergence_episode: convergence_episode(&curve, eval.window, eval.tolerance),
        episodes_to_95: episodes_to_fraction(&curve, eval.window, TARGET_FRACTION),
        latency_ms: jam.clean.latency_ms,
        throughput_kbps: jam.clean.throughput_kbps,
        fairness: jam.clean.fairness,
        clean_delivered: jam.clean_delivered,
        jammed_delivered: jam.jammed_delivered,
        jam_drop: jam.drop,
        rollbacks: out
            .records
            .iter()
            .filter(|r| r.rollback.as_ref().is_some_and(|rb| !rb.accepted))
            .count(),
        rejected_updates: aggregations.iter().map(|a| a.rejected_ids.len()).sum(),
        aggregation_rounds: aggregations.len(),
    })
}

/// Write a deployed policy as checkpoint files in `dir`: `checkpoint.json`
/// for a shared policy, `checkpoint_agent_<i>.json` per agent otherwise.
pub fn save_policy(dir: &Path, policy: &DeployedPolicy, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match policy {
        DeployedPolicy::Shared(p) => Checkpoint::new(p.clone(), config_hash).save(&dir.join("checkpoint.json")),
        DeployedPolicy::PerAgent(ps) => ps.iter().enumerate().try_for_each(|(i, p)| {
            Checkpoint::new(p.clone(), config_hash).save(&dir.join(format!("checkpoint_agent_{i}.json")))
        }),
    }
}

pub fn load_policy(dir: &Path) -> Result<DeployedPolicy> {
    let shared = dir.join("checkpoint.json");
    if shared.exists() {
        return Ok(DeployedPolicy::Shared(Checkpoint::load(&shared)?.params));
    }
    let mut ps = Vec::new();
    loop {
        let path = dir.join(format!("checkpoint_agent_{}.json", ps.len()));
        if !path.exists() {
            break;
        }
        ps.push(Checkpoint::load(&path)?.params);
    }
    if ps.is_empty() {
        return Err(Error::MissingCheckpoint(dir.display().to_string()));
    }
    Ok(DeployedPolicy::PerAgent(ps))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write_seed(dir: &Path, run: &SeedRun, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_learning_curve(&dir.join("learning_curve.csv"), &curve_rows(&[run.outcome.learning_curve()]))?;
    let log = dir.join("round_log.jsonl");
    if log.exists() {
        fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
    }
    fs::write(&log, "").map_err(|e| Error::io(&log, e))?;
    for entry in run.outcome.records.iter().filter_map(|r| r.log_entry()) {
        append_round_log(&log, &entry)?;
    }
    save_policy(dir, &run.outcome.policy, config_hash)
}

/// Train and evaluate every seed of `cfg`, writing per-seed directories,
/// the aggregated learning curve, the summary tables and a manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    Ok(run_experiment_runs(cfg)?.0)
}

/// [`run_experiment`], also handing back the per-seed outcomes.
pub fn run_experiment_runs(cfg: &ExperimentConfig) -> Result<(ResultTable, Vec<SeedRun>)> {
    cfg.check()?;
    let (train, eval) = cfg.resolve()?;
    let hash = cfg.config_hash()?;
    let mut table = ResultTable::default();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = run_training(&train, &mut seeded(seed))?;
        let row = seed_row(cfg.baseline, seed, &outcome, &eval)?;
        let run = SeedRun { seed, outcome, row };
        write_seed(&seed_dir(&cfg.out, seed), &run, &hash)?;
        table.rows.push(run.row.clone());
        runs.push(run);
    }
    let curves: Vec<Vec<f64>> = runs.iter().map(|r| r.outcome.learning_curve()).collect();
    write_learning_curve(&cfg.out.join("learning_curve.csv"), &curve_rows(&curves))?;
    write_summary(&cfg.out, &table)?;
    write_manifest(cfg, "train", &[cfg.baseline], &hash)?;
    Ok((table, runs))
}

/// Run several baselines side by side under `cfg.out/<baseline>`, plus a
/// combined summary at the top.
pub fn run_ablation(cfg: &ExperimentConfig, baselines: &[Baseline]) -> Result<ResultTable> {
    cfg.check()?;
    let mut all = ResultTable::default();
    for &b in baselines {
        let sub = cfg.with_baseline(b, cfg.out.join(b.name()));
        all.rows.extend(run_experiment(&sub)?.rows);
    }
    write_summary(&cfg.out, &all)?;
    write_manifest(cfg, "ablate", baselines, &cfg.config_hash()?)?;
    Ok(all)
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, baselines: &[Baseline], hash: &str) -> Result<()> {
    let mut m = Manifest {
        command: command.into(),
        preset: cfg.preset.name().into(),
        baselines: baselines.iter().map(|b| b.name().to_string()).collect(),
        seeds: cfg.seeds.clone(),
        config_hash: hash.into(),
        files: Default::default(),
    };
    m.collect_files(&cfg.out)?;
    m.write(&cfg.out)
}

/// Strategies compared in the case study, in output order.
pub const CASE_STRATEGIES: [&str; 3] = ["static_shortest_path", "edgeagentx", "edgeagentx_dt"];

/// Replay the scripted scenario under the static router and the two learned
/// controllers, using the first seed of `cfg`. Learned policies come from
/// `checkpoints/<baseline>/seed_<s>/`; missing ones are trained here only if
/// `train_inline` is set (and then saved under `cfg.out`).
pub fn run_case_study(cfg: &ExperimentConfig, checkpoints: &Path, train_inline: bool) -> Result<CaseStudyResult> {
    cfg.check()?;
    let seed = cfg.seeds[0];
    let (_, eval) = cfg.resolve()?;
    let mut policies = Vec::new();
    let mut layout: Option<NetworkState> = None;
    for b in [Baseline::Edgeagentx, Baseline::EdgeagentxDt] {
        let sub = cfg.with_baseline(b, cfg.out.join(b.name()));
        let (train, _) = sub.resolve()?;
        let dir = seed_dir(&checkpoints.join(b.name()), seed);
        let policy = match load_policy(&dir) {
            Ok(p) => p,
            Err(Error::MissingCheckpoint(_)) if train_inline => {
                let outcome = run_training(&train, &mut seeded(seed))?;
                save_policy(&seed_dir(&sub.out, seed), &outcome.policy, &sub.config_hash()?)?;
                outcome.policy
            }
            Err(Error::MissingCheckpoint(_)) => return Err(Error::MissingCheckpoint(format!("{b} ({})", dir.display()))),
            Err(e) => return Err(e),
        };
        layout.get_or_insert_with(|| Trainer::real_layout(&train, &mut seeded(seed)));
        policies.push(policy);
    }
    let base = layout.expect("two strategies");
    let (train, _) = cfg.resolve()?;
    let scenario = Scenario::case_study(train.generator.diffusion.grid);
    let strategies = vec![
        (CASE_STRATEGIES[0].to_string(), Strategy::Static { lag: Some(eval.static_lag) }),
        (CASE_STRATEGIES[1].to_string(), Strategy::Learned(&policies[0])),
        (CASE_STRATEGIES[2].to_string(), Strategy::Learned(&policies[1])),
    ];
    let result = case_study(
        &strategies,
        &base,
        &scenario,
        &train.generator.scenario,
        eval.case_steps,
        eval.case_reps,
        eval.eval_seed,
    )?;
    write_timeseries(&cfg.out.join("timeseries.csv"), &result.series)?;
    write_csv(&cfg.out.join("case_summary.csv"), &CASE_SUMMARY_HEADER, &result.totals)?;
    let mut m = Manifest {
        command: "case-study".into(),
        preset: cfg.preset.name().into(),
        baselines: CASE_STRATEGIES.iter().map(|s| s.to_string()).collect(),
        seeds: vec![seed],
        config_hash: cfg.config_hash()?,
        files: Default::default(),
    };
    m.collect_files(&cfg.out)?;
    m.write(&cfg.out)?;
    Ok(result)
}

pub const CASE_SUMMARY_HEADER: [&str; 3] = ["strategy", "pre_attack", "stress"];

pub fn read_case_summary(path: &Path) -> Result<Vec<StrategyTotals>> {
    super::export::read_csv(path)
}
