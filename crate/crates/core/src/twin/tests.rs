use rand::Rng;

use super::*;
use crate::agent::{ActMode, AgentSpec, CriticView, PolicyParams, Provenance};
use crate::netsim::{observation_dim, Action, NetConfig};
use crate::rng::seeded;

fn cfg(n: usize, area: f64) -> NetConfig {
    NetConfig {
        n_agents: n,
        area_m: area,
        ..NetConfig::default()
    }
}

fn params(cfg: &NetConfig, seed: u64) -> PolicyParams {
    let spec = AgentSpec {
        n_agents: cfg.n_agents,
        obs_dim: observation_dim(cfg),
        heads: cfg.action_heads().to_vec(),
        critic_view: CriticView::Joint,
        actor_hidden: vec![8],
        critic_hidden: vec![8],
    };
    PolicyParams::new(spec, &mut seeded(seed))
}

fn random_actions(cfg: &NetConfig, rng: &mut impl Rng) -> Vec<Action> {
    let h = cfg.action_heads();
    (0..cfg.n_agents)
        .map(|_| Action {
            next_hop: rng.random_range(0..h[0]),
            channel: rng.random_range(0..h[1]),
            power_level: rng.random_range(0..h[2]),
        })
        .collect()
}

fn advanced_world(seed: u64, steps: usize) -> NetworkState {
    let c = cfg(8, 2500.0);
    let mut real = NetworkState::random(&c, seed);
    let mut rng = seeded(seed + 100);
    for _ in 0..steps {
        let a = random_actions(&c, &mut rng);
        real.step(&a, &[]).unwrap();
    }
    real
}

#[test]
fn sync_with_identical_snapshot_is_a_fixed_point() {
    let real = advanced_world(1, 5);
    let mut twin = TwinState::new(&real, TwinConfig::default());
    let before = twin.mirror.clone();
    let snap = RealSnapshot::capture(&real, &BTreeMap::new());
    twin.sync(&snap).unwrap();
    assert_eq!(twin.mirror, before);
    assert_eq!(twin.last_sync_step, 5);
}

#[test]
fn sync_copies_failures_and_is_idempotent() {
    let mut real = advanced_world(2, 3);
    let mut twin = TwinState::new(&real, TwinConfig::default());
    let mut rng = seeded(9);
    for _ in 0..4 {
        let a = random_actions(&real.cfg, &mut rng);
        let due = if real.step == 4 { vec![Event::node_fail(7, 4)] } else { vec![] };
        real.step(&a, &due).unwrap();
    }
    let snap = RealSnapshot::capture(&real, &BTreeMap::new());
    twin.sync(&snap).unwrap();
    assert!(!twin.mirror.nodes[7].alive);
    let once = twin.clone();
    twin.sync(&snap).unwrap();
    assert_eq!(twin, once);
    let d = divergence(&twin, &real).unwrap();
    assert_eq!((d.position, d.alive, d.queue), (0.0, 0.0, 0.0));
}

#[test]
fn stale_and_mismatched_snapshots_are_rejected() {
    let real = advanced_world(3, 6);
    let mut twin = TwinState::new(&real, TwinConfig::default());
    let mut snap = RealSnapshot::capture(&real, &BTreeMap::new());
    snap.step = 2;
    assert!(matches!(
        twin.sync(&snap),
        Err(Error::StaleSync {
            snapshot: 2,
            last_sync: 6
        })
    ));
    let mut snap = RealSnapshot::capture(&real, &BTreeMap::new());
    snap.nodes.pop();
    assert!(matches!(twin.sync(&snap), Err(Error::NodeCountMismatch(9, 8))));
}

#[test]
fn divergence_closed_forms() {
    let real = NetworkState::random(&cfg(8, 5000.0), 4);
    let twin = TwinState::new(&real, TwinConfig::default());
    assert_eq!(divergence(&twin, &real).unwrap().total(), 0.0);

    let mut t = twin.clone();
    t.mirror.nodes[3].alive = false;
    let d = divergence(&t, &real).unwrap();
    assert_eq!(d.alive, 1.0);
    assert_eq!(d.total(), 1.0);

    let mut t = twin.clone();
    let mut rng = seeded(5);
    for n in &mut t.mirror.nodes {
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        n.position[0] += 100.0 * th.cos();
        n.position[1] += 100.0 * th.sin();
    }
    let d = divergence(&t, &real).unwrap();
    let want = 1.0 * (100.0 / 5000.0) * 9.0;
    assert!((d.position - want).abs() < 1e-12);

    let other = NetworkState::random(&cfg(5, 5000.0), 4);
    assert!(divergence(&twin, &other).is_err());
}

fn measurement(d: f64, power: f64, loss: f64, mid: [f64; 2]) -> LinkMeasurement {
    LinkMeasurement {
        from: 0,
        to: 1,
        attempts: 40,
        loss_rate: loss,
        mean_distance: d,
        mean_power_dbm: power,
        mean_visible_jam: 0.0,
        midpoint: mid,
    }
}

fn snapshot_with(real: &NetworkState, links: Vec<LinkMeasurement>) -> RealSnapshot {
    let mut s = RealSnapshot::capture(real, &BTreeMap::new());
    s.links = links;
    s
}

#[test]
fn calibration_residual_oracles() {
    let real = NetworkState::random(&cfg(4, 2500.0), 6);
    let mut twin = TwinState::new(
        &real,
        TwinConfig {
            fit_exponent: false,
            ..TwinConfig::default()
        },
    );
    let mid = [100.0, 100.0];
    let pred = twin.base_prediction(&measurement(900.0, 27.0, 0.0, mid));
    assert!(pred > 0.1 && pred < 0.9);

    // zero residual leaves the grid untouched
    let before = twin.calib.bias.clone();
    twin.calibrate(&snapshot_with(&real, vec![measurement(900.0, 27.0, pred, mid)]));
    assert_eq!(twin.calib.bias, before);

    // +0.2 residual with alpha = 1 sets that cell to 0.2, others stay 0
    twin.calib.ema_alpha = 1.0;
    twin.calibrate(&snapshot_with(&real, vec![measurement(900.0, 27.0, pred + 0.2, mid)]));
    let cell = twin.calib.bias.cell_of(mid);
    assert!((twin.calib.bias.values[cell] - 0.2).abs() < 1e-12);
    assert_eq!(twin.calib.bias.values.iter().filter(|v| **v != 0.0).count(), 1);
    assert_eq!(twin.mirror.loss_bias.as_ref().unwrap().values[cell], twin.calib.bias.values[cell]);

    // a measured loss equal to base + bias keeps the bias
    twin.calib.ema_alpha = 0.2;
    twin.calibrate(&snapshot_with(&real, vec![measurement(900.0, 27.0, pred + 0.2, mid)]));
    assert!((twin.calib.bias.values[cell] - 0.2).abs() < 1e-12);

    // residuals beyond the bound are clamped
    twin.calib.ema_alpha = 1.0;
    twin.calibrate(&snapshot_with(&real, vec![measurement(900.0, 27.0, 1.0, mid), measurement(900.0, 27.0, 1.0, mid)]));
    assert!(twin.calib.bias.values[cell] <= 0.5);

    let report = twin.calibrate(&snapshot_with(&real, vec![]));
    assert!(report.insufficient_data);
}

#[test]
fn exponent_fit_recovers_true_exponent() {
    let real = NetworkState::random(&cfg(4, 2500.0), 7);
    let mut twin = TwinState::new(&real, TwinConfig::default());
    assert_eq!(twin.calib.pathloss_exponent_hat, 3.0);
    let mut truth = real.channel_params.clone();
    truth.pathloss_exponent = 3.5;
    let mut rng = seeded(8);
    for _ in 0..50 {
        let links: Vec<LinkMeasurement> = (0..12)
            .map(|_| {
                let d = rng.random_range(150.0..900.0);
                let power = truth.tx_power(rng.random_range(0..3));
                let p = truth.snr_loss_curve.loss(truth.snr_db(power, d));
                let attempts = 60;
                let fails = (0..attempts).filter(|_| rng.random_bool(p)).count();
                LinkMeasurement {
                    attempts,
                    loss_rate: fails as f64 / attempts as f64,
                    ..measurement(d, power, 0.0, [rng.random_range(0.0..2500.0), 1200.0])
                }
            })
            .collect();
        twin.calibrate(&snapshot_with(&real, links));
    }
    let est = twin.calib.pathloss_exponent_hat;
    assert!((est - 3.5).abs() < 0.1, "exponent {est}");
    assert_eq!(twin.mirror.channel_params.pathloss_exponent, est);
}

/// Real world with a hidden interferer; the twin's loss gap should shrink as
/// windows accumulate.
#[test]
fn calibration_reduces_loss_gap_on_average() {
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..5 {
        let c = cfg(8, 2500.0);
        let mut real = NetworkState::random(&c, 20 + seed);
        real.jammers.push(Jammer {
            position: [800.0, 800.0],
            radius: 900.0,
            active: true,
            affected_channels: vec![0, 1, 2],
            loss_multiplier: 0.3,
            hidden: true,
        });
        let mut twin = TwinState::new(&real, TwinConfig::default());
        twin.mirror.jammers.clear();
        let mut rng = seeded(30 + seed);
        let mut gaps = Vec::new();
        for _ in 0..25 {
            for _ in 0..10 {
                let a = random_actions(&c, &mut rng);
                real.step(&a, &[]).unwrap();
            }
            let links = real.take_link_stats();
            let snap = RealSnapshot::capture(&real, &links);
            twin.sync(&snap).unwrap();
            gaps.push(divergence(&twin, &real).unwrap().loss_gap);
            twin.calibrate(&snap);
        }
        first += gaps[0];
        last += gaps[gaps.len() - 5..].iter().sum::<f64>() / 5.0;
    }
    assert!(last < first, "gap {first} -> {last}");
}

#[test]
fn sync_cadence() {
    let c = TwinConfig::default();
    assert!(c.should_sync(20, &[]));
    assert!(!c.should_sync(21, &[]));
    assert!(c.should_sync(21, &[Event::node_fail(1, 21)]));
    let p = TwinConfig {
        sync_mode: SyncMode::Periodic,
        ..TwinConfig::default()
    };
    assert!(!p.should_sync(21, &[Event::node_fail(1, 21)]));
}

#[test]
fn rollouts_are_isolated_and_reproducible() {
    let real = advanced_world(10, 4);
    let digest = real.digest();
    let twin = TwinState::new(&real, TwinConfig::default());
    let p = params(&real.cfg, 1);
    let opts = RolloutOptions {
        horizon: 30,
        mode: ActMode::Explore {
            temperature: 1.0,
            noise: 0.1,
        },
        ..RolloutOptions::default()
    };
    let a = predictive_rollout(&twin, &p, &opts, &mut seeded(3)).unwrap();
    let b = predictive_rollout(&twin, &p, &opts, &mut seeded(3)).unwrap();
    assert_eq!(a.episode.tuples, b.episode.tuples);
    assert_eq!(a.episode.tuples.len(), 30);
    assert!(a.episode.tuples.iter().all(|t| t.provenance == Provenance::Twin));
    assert_eq!(real.digest(), digest);
    assert_eq!(twin.mirror, TwinState::new(&real, TwinConfig::default()).mirror);

    let empty = predictive_rollout(&twin, &p, &RolloutOptions::default(), &mut seeded(3)).unwrap();
    assert!(empty.episode.tuples.is_empty() && empty.record.is_none());

    let stale = RolloutOptions {
        now: Some(4 + 21),
        ..RolloutOptions::default()
    };
    assert!(predictive_rollout(&twin, &p, &stale, &mut seeded(3)).unwrap().stale);
}

#[test]
fn perfectly_calibrated_twin_matches_real_deliveries() {
    let mut real = advanced_world(11, 7);
    let twin = TwinState::new(&real, TwinConfig::default());
    let p = params(&real.cfg, 2);
    let mode = ActMode::Explore {
        temperature: 1.0,
        noise: 0.5,
    };
    let opts = RolloutOptions {
        horizon: 60,
        mode,
        ..RolloutOptions::default()
    };
    let r = predictive_rollout(&twin, &p, &opts, &mut seeded(0)).unwrap();
    let e = run_policy_episode(&mut real, &p, 60, &[], mode, Provenance::Real, 1.0, &mut seeded(0)).unwrap();
    let twin_delivered: Vec<u64> = r.episode.series.iter().map(|m| m.delivered_units).collect();
    let real_delivered: Vec<u64> = e.series.iter().map(|m| m.delivered_units).collect();
    assert_eq!(twin_delivered, real_delivered);
    assert!(e.delivered() > 0);
}

#[test]
fn per_step_sync_keeps_divergence_at_zero() {
    let c = cfg(6, 2500.0);
    let mut real = NetworkState::random(&c, 12);
    let mut twin = TwinState::new(&real, TwinConfig::default());
    let mut rng = seeded(13);
    for t in 0..60 {
        let a = random_actions(&c, &mut rng);
        let due = if t == 30 { vec![Event::node_fail(2, 30)] } else { vec![] };
        real.step(&a, &due).unwrap();
        twin.mirror.step(&a, &due).unwrap();
        let links = real.take_link_stats();
        twin.sync(&RealSnapshot::capture(&real, &links)).unwrap();
        assert_eq!(divergence(&twin, &real).unwrap().total(), 0.0);
    }
}
