use proptest::prelude::*;
use rand::Rng;

use super::*;

fn cfg_one_power(tx: f64, noise: f64) -> NetConfig {
    NetConfig {
        n_agents: 2,
        speed_range: (0.0, 0.0),
        default_power_level: 0,
        channel: ChannelParams {
            tx_power_table: vec![tx],
            noise_floor_dbm: noise,
            reference_loss_db: 40.0,
            pathloss_exponent: 3.0,
            ..ChannelParams::default()
        },
        ..NetConfig::default()
    }
}

#[test]
fn snr_at_reference_distance() {
    let cfg = cfg_one_power(20.0, -90.0);
    let s = NetworkState::with_positions(&cfg, &[[100.0, 100.0], [101.0, 100.0]], 0);
    assert!((s.link_snr(0, 1).unwrap() - 70.0).abs() < 1e-9);
}

#[test]
fn snr_at_one_kilometre() {
    // 20 - (40 + 30 * log10(1000)) + 90 = -20
    let cfg = cfg_one_power(20.0, -90.0);
    let s = NetworkState::with_positions(&cfg, &[[0.0, 0.0], [1000.0, 0.0]], 0);
    assert!((s.link_snr(0, 1).unwrap() + 20.0).abs() < 1e-9);
}

#[test]
fn coincident_nodes_clamp_to_one_metre() {
    let cfg = cfg_one_power(20.0, -90.0);
    let s = NetworkState::with_positions(&cfg, &[[5.0, 5.0], [5.0, 5.0]], 0);
    assert!((s.link_snr(0, 1).unwrap() - 70.0).abs() < 1e-9);
}

#[test]
fn dead_endpoint_is_an_error() {
    let cfg = cfg_one_power(20.0, -90.0);
    let mut s = NetworkState::with_positions(&cfg, &[[0.0, 0.0], [10.0, 0.0]], 0);
    s.nodes[1].alive = false;
    assert!(matches!(s.link_snr(0, 1), Err(Error::DeadLink(1))));
}

#[test]
fn jammer_raises_loss_not_snr() {
    let cfg = cfg_one_power(27.0, -90.0);
    let mut s = NetworkState::with_positions(&cfg, &[[0.0, 0.0], [200.0, 0.0]], 0);
    let snr = s.link_snr(0, 1).unwrap();
    let clean = s.link_loss(0, 1).unwrap();
    s.jammers.push(Jammer {
        position: [250.0, 0.0],
        radius: 100.0,
        active: true,
        affected_channels: vec![0],
        loss_multiplier: 0.8,
        hidden: false,
    });
    assert_eq!(s.link_snr(0, 1).unwrap(), snr);
    // oracle: clamp(curve(snr) + 0.8, 0, 1)
    let expected = (LossCurve::default().loss(snr) + 0.8).min(1.0);
    assert!((s.link_loss(0, 1).unwrap() - expected).abs() < 1e-12);
    assert!(s.link_loss(0, 1).unwrap() >= clean);
    // another channel escapes
    s.nodes[0].channel = 1;
    assert_eq!(s.link_loss(0, 1).unwrap(), clean);
}

fn small_state() -> NetworkState {
    let cfg = NetConfig {
        n_agents: 8,
        speed_range: (0.0, 0.0),
        ..NetConfig::default()
    };
    NetworkState::random(&cfg, 11)
}

#[test]
fn node_fail_event() {
    let mut s = small_state();
    s.step = 60;
    s.apply_event(&Event::node_fail(7, 60)).unwrap();
    assert!(!s.nodes[7].alive);
    assert!(matches!(
        s.apply_event(&Event::node_fail(7, 61)),
        Err(Error::EventNotDue { .. })
    ));
    assert!(matches!(
        s.apply_event(&Event::node_fail(42, 60)),
        Err(Error::UnknownEntity(_))
    ));
    s.apply_event(&Event::node_recover(7, 60)).unwrap();
    assert!(s.nodes[7].alive && s.nodes[7].queue.is_empty());
}

#[test]
fn surge_doubles_load_for_its_duration() {
    let mut s = small_state();
    let base = s.effective_load();
    let idle = vec![
        Action {
            next_hop: 0,
            channel: 0,
            power_level: 0
        };
        8
    ];
    for t in 0..100u32 {
        let ev: Vec<Event> = if t == 55 {
            vec![Event::surge(2.0, 55, 30)]
        } else {
            vec![]
        };
        s.step(&idle, &ev).unwrap();
        let load_next = s.effective_load();
        // load in force during step t+1
        let expect = if (55..85).contains(&(t + 1)) && t >= 55 { 2.0 * base } else { base };
        assert!((load_next - expect).abs() < 1e-12, "t={t}");
    }
}

#[test]
fn jammer_toggles() {
    let mut s = small_state();
    s.jammers.push(Jammer {
        position: [0.0, 0.0],
        radius: 1000.0,
        active: false,
        affected_channels: vec![0, 1, 2],
        loss_multiplier: 0.8,
        hidden: false,
    });
    s.step = 50;
    s.apply_event(&Event::jammer_on(0, 50)).unwrap();
    assert!(s.jammers[0].active);
    assert!(matches!(
        s.apply_event(&Event::jammer_on(3, 50)),
        Err(Error::UnknownEntity(_))
    ));
    s.apply_event(&Event::jammer_off(0, 50)).unwrap();
    assert!(!s.jammers[0].active);
}

#[test]
fn two_node_chain_delivers_in_one_step() {
    let cfg = NetConfig {
        n_agents: 1,
        offered_load: 1.0,
        service_rate: 1,
        speed_range: (0.0, 0.0),
        gateway_position: Some([100.0, 100.0]),
        ..NetConfig::default()
    };
    let mut s = NetworkState::with_positions(&cfg, &[[110.0, 100.0]], 0);
    assert_eq!(s.link_loss(0, 1).unwrap(), 0.0);
    let out = s
        .step(
            &[Action {
                next_hop: cfg.k_neighbors,
                channel: 0,
                power_level: 1,
            }],
            &[],
        )
        .unwrap();
    assert_eq!(out.metrics.generated, 1);
    assert_eq!(out.metrics.delivered_units, 1);
    assert_eq!(out.metrics.dropped_units, 0);
    assert!((out.metrics.sum_latency_ms - 100.0).abs() < 1e-12);
    assert_eq!(out.metrics.per_node_credit[0], 1.0);
    assert_eq!(s.nodes[0].queue.len(), 0);
}

#[test]
fn relay_adds_one_hop_per_step() {
    let cfg = NetConfig {
        n_agents: 2,
        offered_load: 0.0,
        speed_range: (0.0, 0.0),
        gateway_position: Some([0.0, 0.0]),
        ..NetConfig::default()
    };
    let mut s = NetworkState::with_positions(&cfg, &[[400.0, 0.0], [200.0, 0.0]], 0);
    s.nodes[0].queue.push_back(Packet {
        uid: 99,
        origin: 0,
        created_step: 0,
        hops: 0,
        path: vec![],
    });
    let k = cfg.k_neighbors;
    let acts = [
        Action { next_hop: 0, channel: 0, power_level: 2 },
        Action { next_hop: k, channel: 0, power_level: 2 },
    ];
    let o1 = s.step(&acts, &[]).unwrap();
    assert_eq!(o1.metrics.delivered_units, 0);
    assert_eq!(s.nodes[1].queue[0].hops, 1);
    let o2 = s.step(&acts, &[]).unwrap();
    assert_eq!(o2.metrics.delivered_units, 1);
    assert!((o2.metrics.sum_latency_ms - 200.0).abs() < 1e-12);
    assert!((o2.metrics.per_node_credit[0] - 0.5).abs() < 1e-12);
    assert!((o2.metrics.per_node_credit[1] - 0.5).abs() < 1e-12);
}

#[test]
fn all_agents_dead_is_silent() {
    let mut s = small_state();
    for n in s.nodes.iter_mut().take(8) {
        n.alive = false;
    }
    let acts = vec![Action { next_hop: 0, channel: 0, power_level: 0 }; 8];
    let out = s.step(&acts, &[]).unwrap();
    assert_eq!(out.metrics.generated, 0);
    assert_eq!(out.metrics.delivered_units, 0);
    assert_eq!(out.metrics.dropped_units, 0);
    assert!(out.rewards.iter().all(|&r| r == 0.0));
}

#[test]
fn zero_load_only_moves_the_clock() {
    let cfg = NetConfig {
        offered_load: 0.0,
        ..NetConfig::default()
    };
    let mut s = NetworkState::random(&cfg, 5);
    let before = s.nodes[0].position;
    let acts = vec![Action { next_hop: 0, channel: 0, power_level: 0 }; 8];
    let out = s.step(&acts, &[]).unwrap();
    assert_eq!(out.metrics, StepMetrics { mean_queue: 0.0, ..StepMetrics::new(9) });
    assert_eq!(s.step, 1);
    assert_ne!(s.nodes[0].position, before);
}

#[test]
fn malformed_actions_rejected() {
    let mut s = small_state();
    let acts = vec![Action { next_hop: 0, channel: 0, power_level: 0 }; 3];
    assert!(matches!(s.step(&acts, &[]), Err(Error::ActionShape { .. })));
    let mut acts = vec![Action { next_hop: 0, channel: 0, power_level: 0 }; 8];
    acts[2].channel = 9;
    assert!(matches!(s.step(&acts, &[]), Err(Error::ActionShape { .. })));
}

#[test]
fn isolated_node_observation() {
    let cfg = NetConfig {
        n_agents: 1,
        ..NetConfig::default()
    };
    let s = NetworkState::with_positions(&cfg, &[[10.0, 10.0]], 0);
    let o = s.observe(0);
    assert_eq!(o.0.len(), observation_dim(&cfg));
    assert_eq!(o.0[0], 1.0);
    // neighbor slots hold the floor encoding
    assert!(o.0[1..1 + 4 * cfg.k_neighbors].iter().all(|&v| v == 0.0));
    // own queue fill
    assert_eq!(o.0[1 + 4 * cfg.k_neighbors + 2], 0.0);
    assert_eq!(s.observe(0), o);
}

#[test]
fn jam_detect_threshold() {
    let mut s = small_state();
    let idx = NetworkState::jam_detect_index(&s.cfg);
    s.nodes[3].recent_success = 0.1; // loss rate 0.9
    assert_eq!(s.observe(3).0[idx], 1.0);
    s.nodes[3].recent_success = 0.9;
    assert_eq!(s.observe(3).0[idx], 0.0);
}

#[test]
fn dead_node_observes_zero() {
    let mut s = small_state();
    s.nodes[2].alive = false;
    assert!(s.observe(2).0.iter().all(|&v| v == 0.0));
}

#[test]
fn reward_examples() {
    let s = small_state();
    let w = s.cfg.reward.clone();
    let mut m = StepMetrics::new(9);
    m.generated = 1;
    m.delivered_units = 1;
    m.per_node_credit[0] = 1.0;
    assert!((s.reward(&m, 0) - (w.throughput + w.global)).abs() < 1e-12);

    let mut m = StepMetrics::new(9);
    m.generated = 1;
    m.dropped_units = 1;
    m.per_node_dropped[0] = 1;
    assert!((s.reward(&m, 0) + w.drop).abs() < 1e-12);

    let mut dead = s.clone();
    dead.nodes[0].alive = false;
    assert_eq!(dead.reward(&m, 0), 0.0);
}

#[test]
fn episode_metrics_examples() {
    let mut series = Vec::new();
    for i in 0..100 {
        let mut m = StepMetrics::new(11);
        m.generated = 10;
        m.delivered_units = if i < 50 { 9 } else { 8 };
        m.sum_latency_ms = m.delivered_units as f64 * 100.0;
        for k in 0..10 {
            m.per_node_delivered[k] = if (k as u64) < m.delivered_units { 1 } else { 0 };
        }
        series.push(m);
    }
    let r = episode_metrics(&series, 0.1, 1.0).unwrap();
    assert_eq!(r.delivered, 850);
    assert!((r.throughput_kbps - 85.0).abs() < 1e-9);
    assert_eq!(r.latency_ms, Some(100.0));

    let zero = vec![StepMetrics::new(3); 10];
    let r = episode_metrics(&zero, 0.1, 1.0).unwrap();
    assert_eq!(r.latency_ms, None);
    assert_eq!(r.throughput_kbps, 0.0);

    assert!((jain_index(&[3.0, 3.0, 3.0]) - 1.0).abs() < 1e-12);
    assert!(matches!(episode_metrics(&[], 0.1, 1.0), Err(Error::EmptyEpisode)));
}

fn action_stream(seed: u64, n: usize, steps: usize, cfg: &NetConfig) -> Vec<Vec<Action>> {
    let mut r = crate::rng::seeded(seed);
    let heads = cfg.action_heads();
    (0..steps)
        .map(|_| {
            (0..n)
                .map(|_| Action {
                    next_hop: r.random_range(0..heads[0]),
                    channel: r.random_range(0..heads[1]),
                    power_level: r.random_range(0..heads[2]),
                })
                .collect()
        })
        .collect()
}

fn run(state: &mut NetworkState, actions: &[Vec<Action>], events: &[Event]) -> Vec<StepMetrics> {
    actions
        .iter()
        .map(|a| {
            let due: Vec<Event> = events.iter().filter(|e| e.time == state.step).cloned().collect();
            state.step(a, &due).unwrap().metrics
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identical_inputs_give_identical_states(seed in 0u64..1000, aseed in 0u64..1000) {
        let cfg = NetConfig::default();
        let acts = action_stream(aseed, cfg.n_agents, 40, &cfg);
        let events = vec![Event::node_fail(3, 10), Event::surge(2.0, 15, 10)];
        let mut a = NetworkState::random(&cfg, seed);
        let mut b = NetworkState::random(&cfg, seed);
        run(&mut a, &acts, &events);
        run(&mut b, &acts, &events);
        prop_assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn packets_are_conserved(seed in 0u64..1000, aseed in 0u64..1000, load in 0.0f64..2.0) {
        let cfg = NetConfig { offered_load: load, ..NetConfig::default() };
        let acts = action_stream(aseed, cfg.n_agents, 60, &cfg);
        let events = vec![Event::node_fail(1, 20), Event::node_recover(1, 40), Event::surge(3.0, 25, 10)];
        let mut s = NetworkState::random(&cfg, seed);
        let series = run(&mut s, &acts, &events);
        let generated: u64 = series.iter().map(|m| m.generated).sum();
        let delivered: u64 = series.iter().map(|m| m.delivered_units).sum();
        let dropped: u64 = series.iter().map(|m| m.dropped_units).sum();
        prop_assert_eq!(generated, delivered + dropped + s.queued_units() as u64);
        for m in &series {
            // each delivery took at least one step-slot
            prop_assert!(m.sum_latency_ms + 1e-9 >= m.delivered_units as f64 * s.step_duration * 1000.0);
        }
    }

    #[test]
    fn jamming_never_helps_uncongested(seed in 0u64..1000, aseed in 0u64..1000,
                                      jx in 0.0f64..2500.0, jy in 0.0f64..2500.0, r in 100.0f64..1500.0) {
        // Queues never back up, so each packet's path depends only on the action stream.
        let cfg = NetConfig { queue_capacity: 64, service_rate: 64, ..NetConfig::default() };
        let acts = action_stream(aseed, cfg.n_agents, 50, &cfg);
        let mut clean = NetworkState::random(&cfg, seed);
        let mut jammed = clean.clone();
        jammed.jammers.push(Jammer {
            position: [jx, jy], radius: r, active: true,
            affected_channels: vec![0, 1], loss_multiplier: 0.5, hidden: false,
        });
        let a: u64 = run(&mut clean, &acts, &[]).iter().map(|m| m.delivered_units).sum();
        let b: u64 = run(&mut jammed, &acts, &[]).iter().map(|m| m.delivered_units).sum();
        prop_assert!(b <= a);
    }

    #[test]
    fn snr_strictly_decreases_with_distance(d1 in 1.0f64..5000.0, gap in 0.01f64..1000.0, level in 0usize..3) {
        let p = ChannelParams::default();
        let tx = p.tx_power(level);
        prop_assert!(p.snr_db(tx, d1 + gap) < p.snr_db(tx, d1));
    }

    #[test]
    fn positions_stay_in_bounds(seed in 0u64..1000) {
        let cfg = NetConfig { speed_range: (50.0, 200.0), ..NetConfig::default() };
        let acts = action_stream(seed, cfg.n_agents, 80, &cfg);
        let mut s = NetworkState::random(&cfg, seed);
        for a in &acts {
            s.step(a, &[]).unwrap();
            for n in &s.nodes {
                prop_assert!((0.0..=cfg.area_m).contains(&n.position[0]));
                prop_assert!((0.0..=cfg.area_m).contains(&n.position[1]));
                prop_assert!(n.queue.len() <= cfg.queue_capacity);
            }
        }
    }
}
