use statrs::distribution::{ContinuousCDF, StudentsT};

use super::*;
use crate::agent::{ExperienceTuple, Provenance, ReplayBuffer};
use crate::rng::seeded;
use crate::scengen::{DiffusionConfig, EventModelConfig};

fn tiny(b: Baseline) -> TrainConfig {
    let mut cfg = TrainConfig::default().with_baseline(b);
    cfg.net.n_agents = 4;
    cfg.net.area_m = 1200.0;
    cfg.iterations = 4;
    cfg.real_steps_per_iter = 20;
    cfg.episode_len = 20;
    cfg.twin_episodes_per_iter = 2;
    cfg.central_updates = 1;
    cfg.scenario_pool = 6;
    cfg.hyper.batch_size = 16;
    cfg.hyper.actor_hidden = vec![8];
    cfg.hyper.critic_hidden = vec![8];
    cfg.generator.grid_corpus = 40;
    cfg.generator.event_corpus = 20;
    cfg.generator.diffusion = DiffusionConfig {
        hidden: vec![16],
        time_embed: 4,
        epochs: 1,
        ..DiffusionConfig::default()
    };
    cfg.generator.events = EventModelConfig {
        d_model: 6,
        d_ff: 6,
        epochs: 1,
        ..EventModelConfig::default()
    };
    cfg
}

fn tuple(tag: f64) -> ExperienceTuple {
    ExperienceTuple {
        joint_obs: vec![tag],
        joint_action: vec![0.0],
        rewards: vec![0.0],
        joint_next_obs: vec![tag],
        done: false,
        provenance: Provenance::Real,
        weight: 1.0,
    }
}

fn buffer(n: usize) -> ReplayBuffer {
    let mut b = ReplayBuffer::new(100);
    b.extend((0..n).map(|i| tuple(i as f64)));
    b
}

#[test]
fn baseline_names_round_trip() {
    for b in Baseline::ALL {
        assert_eq!(b.name().parse::<Baseline>().unwrap(), b);
    }
    assert!(matches!("nope".parse::<Baseline>(), Err(Error::UnknownBaseline(_))));
}

#[test]
fn attackers_round_to_nearest() {
    let a = AttackConfig {
        fraction: 0.3,
        kind: crate::fed::AttackKind::SignFlip { scale: 1.0 },
    };
    assert_eq!(a.attackers(8), 2);
    assert_eq!(a.attackers(20), 6);
}

#[test]
fn zero_iterations_keep_initial_params() {
    let mut cfg = tiny(Baseline::Edgeagentx);
    cfg.iterations = 0;
    let out = run_training(&cfg, &mut seeded(3)).unwrap();
    assert!(out.records.is_empty());
    let t = Trainer::new(cfg, None, &mut seeded(3)).unwrap();
    assert_eq!(out.policy, t.policy);
}

#[test]
fn invalid_config_is_rejected() {
    let mut cfg = tiny(Baseline::Edgeagentx);
    cfg.sim_to_real = 1.5;
    assert!(matches!(run_training(&cfg, &mut seeded(0)), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(Baseline::EdgeagentxDt);
    let a = run_training(&cfg, &mut seeded(9)).unwrap();
    let b = run_training(&cfg, &mut seeded(9)).unwrap();
    assert_eq!(serde_json::to_string(&a.records).unwrap(), serde_json::to_string(&b.records).unwrap());
    assert_eq!(a.policy, b.policy);
}

#[test]
fn disabling_twin_reduces_to_plain_federated_marl() {
    let reference = run_training(&tiny(Baseline::Edgeagentx), &mut seeded(4)).unwrap();
    let records = |cfg: TrainConfig| serde_json::to_string(&run_training(&cfg, &mut seeded(4)).unwrap().records).unwrap();
    let expect = serde_json::to_string(&reference.records).unwrap();

    let mut off = tiny(Baseline::EdgeagentxDt);
    off.wiring.twin = false;
    off.wiring.genai = false;
    assert_eq!(records(off), expect);

    let mut zero = tiny(Baseline::EdgeagentxDt);
    zero.wiring.genai = false;
    zero.twin_episodes_per_iter = 0;
    assert_eq!(records(zero), expect);
}

#[test]
fn versions_strictly_increase() {
    for b in [Baseline::EdgeagentxDt, Baseline::Edgeagentx, Baseline::NoDefense] {
        let out = run_training(&tiny(b), &mut seeded(1)).unwrap();
        let mut last = 0;
        for r in &out.records {
            assert!(r.error.is_none(), "{b}: {:?}", r.error);
            assert!(r.version > last, "{b}: version {} after {last}", r.version);
            last = r.version;
        }
    }
}

#[test]
fn every_baseline_runs() {
    for b in Baseline::ALL {
        let out = run_training(&tiny(b), &mut seeded(2)).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.records.iter().all(|r| r.error.is_none()), "{b}");
        assert_eq!(out.twin.is_some(), b.wiring().twin, "{b}");
        let twin_rounds = out.records.iter().filter(|r| !r.twin_returns.is_empty()).count();
        assert_eq!(twin_rounds > 0, b.wiring().twin, "{b}");
        assert_eq!(matches!(out.policy, DeployedPolicy::PerAgent(_)), !b.wiring().shared, "{b}");
    }
}

#[test]
fn twin_loop_logs_divergence_and_validation() {
    let out = run_training(&tiny(Baseline::EdgeagentxDt), &mut seeded(5)).unwrap();
    for r in &out.records {
        assert!(r.divergence.is_some_and(f64::is_finite));
        assert_eq!(r.twin_returns.len(), 2);
        let rb = r.rollback.as_ref().expect("validated");
        assert!(!rb.degraded);
        assert!(r.log_entry().is_some());
    }
}

#[test]
fn attackers_are_rejected_by_robust_aggregation() {
    let mut cfg = tiny(Baseline::Edgeagentx);
    cfg.attack = Some(AttackConfig {
        fraction: 0.25,
        kind: crate::fed::AttackKind::SignFlip { scale: 10.0 },
    });
    let out = run_training(&cfg, &mut seeded(6)).unwrap();
    let rejected: usize = out
        .records
        .iter()
        .filter_map(|r| r.aggregation.as_ref())
        .filter(|a| a.rejected_ids.contains(&0))
        .count();
    assert!(rejected >= 3, "attacker rejected in {rejected}/4 rounds");
}

#[test]
fn real_standing_jammer_follows_probability() {
    let mut cfg = tiny(Baseline::Edgeagentx);
    let t = Trainer::new(cfg.clone(), None, &mut seeded(0)).unwrap();
    assert!((0..50).all(|it| t.real_standing_jammer(it).is_none()));
    cfg.real_world.standing_jam_prob = 1.0;
    let t = Trainer::new(cfg.clone(), None, &mut seeded(0)).unwrap();
    for it in 0..20 {
        let j = t.real_standing_jammer(it).unwrap();
        assert_eq!(j.affected_channels.len(), cfg.net.n_channels - 1);
        let gw = cfg.net.gateway_pos();
        assert!((j.position[0] - gw[0]).abs() <= cfg.real_world.standing_jam_offset_m + 1e-9);
    }
}

// Learning progress on a small network: late returns beat early ones.
#[test]
fn returns_improve_over_training() {
    let mut diffs = Vec::new();
    for seed in 0..5 {
        let mut cfg = TrainConfig::default().with_baseline(Baseline::Edgeagentx);
        cfg.net.n_agents = 4;
        cfg.net.area_m = 1500.0;
        cfg.iterations = 200;
        let c = run_training(&cfg, &mut seeded(seed)).unwrap().learning_curve();
        let early = c[..20].iter().sum::<f64>() / 20.0;
        let late = c[c.len() - 20..].iter().sum::<f64>() / 20.0;
        diffs.push(late - early);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    assert!(p < 0.01, "improvements {diffs:?}, one-sided p = {p}");
}

#[test]
fn mix_with_ratio_zero_is_all_real() {
    let plan = real_twin_mix(&buffer(5), &buffer(5), 0.0, 200, &mut seeded(0)).unwrap();
    assert_eq!(plan.twin_count(), 0);
    assert!(!plan.shortage);
    let plan = real_twin_mix(&buffer(5), &buffer(5), 1.0, 200, &mut seeded(0)).unwrap();
    assert_eq!(plan.twin_count(), 200);
}

#[test]
fn mix_falls_back_when_a_pool_is_empty() {
    let plan = real_twin_mix(&buffer(5), &buffer(0), 0.67, 50, &mut seeded(1)).unwrap();
    assert_eq!(plan.twin_count(), 0);
    assert!(plan.shortage);
    assert_eq!(plan.resolve(&buffer(5), &buffer(0)).len(), 50);
    let plan = real_twin_mix(&buffer(0), &buffer(5), 0.67, 50, &mut seeded(1)).unwrap();
    assert_eq!(plan.twin_count(), 50);
    assert!(plan.shortage);
}

#[test]
fn mix_rejects_empty_pools_and_bad_ratio() {
    assert!(matches!(
        real_twin_mix(&buffer(0), &buffer(0), 0.5, 4, &mut seeded(0)),
        Err(Error::EmptyPools)
    ));
    assert!(matches!(
        real_twin_mix(&buffer(3), &buffer(3), -0.1, 4, &mut seeded(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn mix_twin_count_is_binomial() {
    // Over many batches of 64 at ratio 0.67, the twin count has mean n*p and
    // variance n*p*(1-p).
    let (n, p, reps) = (64usize, 0.67, 2000);
    let mut rng = seeded(7);
    let counts: Vec<f64> = (0..reps)
        .map(|_| real_twin_mix(&buffer(10), &buffer(10), p, n, &mut rng).unwrap().twin_count() as f64)
        .collect();
    let mean = counts.iter().sum::<f64>() / reps as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
    let (m0, v0) = (n as f64 * p, n as f64 * p * (1.0 - p));
    assert!((mean - m0).abs() < 4.0 * (v0 / reps as f64).sqrt(), "mean {mean} vs {m0}");
    assert!((var / v0 - 1.0).abs() < 0.15, "var {var} vs {v0}");
}

#[test]
fn convergence_of_constant_curve_is_immediate() {
    assert_eq!(convergence_episode(&[5.0; 100], 10, 0.05), Some(0));
}

#[test]
fn convergence_detects_step() {
    let c: Vec<f64> = (0..300).map(|t| if t < 100 { 0.0 } else { 10.0 }).collect();
    let e = convergence_episode(&c, 10, 0.05).unwrap();
    assert!((99..=100).contains(&e), "{e}");
}

#[test]
fn convergence_rejects_unplateaued_growth() {
    let c: Vec<f64> = (0..200).map(|t| (t as f64 * 0.05).exp()).collect();
    assert_eq!(convergence_episode(&c, 10, 0.05), None);
    assert_eq!(convergence_episode(&[1.0; 5], 10, 0.05), None);
}

#[test]
fn final_smoothed_averages_the_tail() {
    assert_eq!(final_smoothed(&[0.0, 0.0, 3.0, 5.0], 2), 4.0);
    assert_eq!(final_smoothed(&[2.0], 10), 2.0);
    assert_eq!(final_smoothed(&[], 10), 0.0);
}

#[test]
fn real_layout_matches_training_base() {
    let cfg = tiny(Baseline::Edgeagentx);
    let out = run_training(&cfg, &mut seeded(8)).unwrap();
    assert_eq!(Trainer::real_layout(&cfg, &mut seeded(8)), out.real_base);
}

#[test]
fn episodes_to_fraction_uses_trailing_average() {
    let c: Vec<f64> = (0..100).map(|t| if t < 40 { 0.0 } else { 10.0 }).collect();
    // Trailing window of 10 first reaches 9.5 once all ten entries are high.
    assert_eq!(episodes_to_fraction(&c, 10, 0.95), Some(49));
    assert_eq!(episodes_to_fraction(&c, 10, 0.5), Some(44));
    assert_eq!(episodes_to_fraction(&[-2.0; 30], 10, 0.95), Some(9));
    assert_eq!(episodes_to_fraction(&[1.0; 3], 10, 0.95), None);
}
