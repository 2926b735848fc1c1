use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};

use edgetwin::bench::export::{write_csv, Manifest};
use edgetwin::bench::tools::write_calibration;
use edgetwin::bench::{
    calibration_demo, generate_scenarios, jam_eval, load_policy, run_ablation, run_case_study, run_experiment, ConfigFile,
    ExperimentConfig, Strategy,
};
use edgetwin::rng::seeded;
use edgetwin::trainer::{Baseline, Trainer};

#[derive(Parser)]
#[command(name = "edgetwin", version, about = "Mesh simulator, digital twin and federated MARL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one baseline over the configured seeds.
    Train(Common),
    /// Evaluate saved policies, clean and under standing jammers.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Training output directory holding seed_<n>/ checkpoints.
        #[arg(long)]
        from: PathBuf,
    },
    /// Replay the scripted attack under the static router and both learned controllers.
    CaseStudy {
        #[command(flatten)]
        common: Common,
        /// Directory with <baseline>/seed_<n>/ checkpoints (defaults to --out).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Train the scenario generator and write sampled scenarios.
    GenScenarios {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Show the twin converging on a mis-modelled channel.
    CalibrateDemo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        /// Real path-loss exponent minus the nominal one.
        #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
        offset: f64,
    },
    /// Run several baselines side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated baselines (default: all).
        #[arg(long, value_delimiter = ',')]
        baselines: Vec<String>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with preset, baseline, seeds, out and an [overrides] table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    baseline: Option<String>,
    /// Repeat for several seeds.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory (default: the config file's, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training episodes (iterations of the outer loop).
    #[arg(long)]
    episodes: Option<usize>,
    /// Train missing checkpoints instead of failing.
    #[arg(long)]
    train_inline: bool,
}

impl Common {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut file = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        if self.preset.is_some() {
            file.preset = self.preset.clone();
        }
        if self.baseline.is_some() {
            file.baseline = self.baseline.clone();
        }
        if !self.seeds.is_empty() {
            file.seeds = Some(self.seeds.clone());
        }
        if self.out.is_some() {
            file.out = self.out.clone();
        }
        let mut cfg = ExperimentConfig::from_file(&file, "out")?;
        if let Some(n) = self.episodes {
            cfg.set("iterations", n);
        }
        cfg.resolve()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = c.experiment()?;
            let table = run_experiment(&cfg)?;
            for r in &table.rows {
                println!(
                    "{} seed {}: final return {:.2}, 95% at {}, jam drop {:.3}",
                    r.baseline,
                    r.seed,
                    r.final_return,
                    r.episodes_to_95.map_or("-".into(), |e| e.to_string()),
                    r.jam_drop
                );
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval { common, from } => eval(&common, &from)?,
        Command::CaseStudy { common, checkpoints } => {
            let cfg = common.experiment()?;
            let ck = checkpoints.unwrap_or_else(|| cfg.out.clone());
            let res = run_case_study(&cfg, &ck, common.train_inline)?;
            for t in &res.totals {
                println!("{}: pre-attack {:.1}, stress window {:.1} delivered units", t.strategy, t.pre_attack, t.stress);
            }
        }
        Command::GenScenarios { common, count } => {
            let cfg = common.experiment()?;
            let (train, _) = cfg.resolve()?;
            let stats = generate_scenarios(&train.generator, &train.effective_net(), count, cfg.seeds[0], &cfg.out)?;
            let adversarial = stats.iter().filter(|s| s.adversarial).count();
            let feasible = stats.iter().filter(|s| s.feasible).count();
            println!("{} scenarios, {adversarial} adversarial, {feasible} feasible", stats.len());
            manifest(&cfg, "gen-scenarios")?;
        }
        Command::CalibrateDemo { common, rounds, offset } => {
            let cfg = common.experiment()?;
            let (train, _) = cfg.resolve()?;
            let window = train.real_steps_per_iter.min(u32::MAX as usize) as u32;
            let rows = calibration_demo(&train, rounds, window, offset, cfg.seeds[0])?;
            std::fs::create_dir_all(&cfg.out).map_err(|e| anyhow!("{}: {e}", cfg.out.display()))?;
            write_calibration(&cfg.out.join("calibration.csv"), &rows)?;
            for r in &rows {
                println!(
                    "round {:>3}: exponent {:.3} (true {:.3}), loss gap {:.4}",
                    r.round, r.exponent_hat, r.exponent_true, r.loss_gap_after
                );
            }
            manifest(&cfg, "calibrate-demo")?;
        }
        Command::Ablate { common, baselines } => {
            let cfg = common.experiment()?;
            let list: Vec<Baseline> = if baselines.is_empty() {
                Baseline::ALL.to_vec()
            } else {
                baselines.iter().map(|b| b.parse()).collect::<Result<_, _>>()?
            };
            let table = run_ablation(&cfg, &list)?;
            for a in table.aggregate().iter().filter(|a| a.metric == "final_return" || a.metric == "episodes_to_95") {
                println!("{:<20} {:<16} {:>9.2} ± {:.2} (n={})", a.baseline, a.metric, a.mean, a.std, a.n);
            }
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalRow {
    strategy: String,
    seed: u64,
    clean_delivered: f64,
    jammed_delivered: f64,
    drop: f64,
    latency_ms: Option<f64>,
    throughput_kbps: f64,
    fairness: f64,
}

fn eval(common: &Common, from: &Path) -> Result<()> {
    let cfg = common.experiment()?;
    let (train, eval) = cfg.resolve()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let dir = from.join(format!("seed_{seed}"));
        let policy = load_policy(&dir)?;
        let base = Trainer::real_layout(&train, &mut seeded(seed));
        let strategies = [
            (cfg.baseline.name().to_string(), Strategy::Learned(&policy)),
            ("static_shortest_path".to_string(), Strategy::Static { lag: Some(eval.static_lag) }),
        ];
        for (name, s) in strategies {
            let j = jam_eval(&s, &base, &eval)?;
            println!("{name} seed {seed}: clean {:.1}, jammed {:.1}, drop {:.3}", j.clean_delivered, j.jammed_delivered, j.drop);
            rows.push(EvalRow {
                strategy: name,
                seed,
                clean_delivered: j.clean_delivered,
                jammed_delivered: j.jammed_delivered,
                drop: j.drop,
                latency_ms: j.clean.latency_ms,
                throughput_kbps: j.clean.throughput_kbps,
                fairness: j.clean.fairness,
            });
        }
    }
    let header = [
        "strategy",
        "seed",
        "clean_delivered",
        "jammed_delivered",
        "drop",
        "latency_ms",
        "throughput_kbps",
        "fairness",
    ];
    write_csv(&cfg.out.join("eval.csv"), &header, &rows)?;
    manifest(&cfg, "eval")
}

fn manifest(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    if !cfg.out.is_dir() {
        bail!("output directory {} was not created", cfg.out.display());
    }
    let mut m = Manifest {
        command: command.into(),
        preset: cfg.preset.name().into(),
        baselines: vec![cfg.baseline.name().into()],
        seeds: cfg.seeds.clone(),
        config_hash: cfg.config_hash()?,
        files: Default::default(),
    };
    m.collect_files(&cfg.out)?;
    m.write(&cfg.out)?;
    Ok(())
}
