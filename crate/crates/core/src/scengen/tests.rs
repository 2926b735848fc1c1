use std::sync::OnceLock;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::synth::*;
use super::*;
use crate::error::Error;
use crate::netsim::{Event, EventKind, NetConfig, NetworkState};
use crate::nn::{Activation, Mlp};
use crate::rng::seeded;

fn small_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        grid: 4,
        hidden: vec![16, 16],
        time_embed: 4,
        batch: 8,
        epochs: 5,
        ..DiffusionConfig::default()
    }
}

/// Default-size model fitted on the 1000-grid interference corpus.
fn corpus_model() -> &'static DiffusionModel {
    static M: OnceLock<DiffusionModel> = OnceLock::new();
    M.get_or_init(|| {
        let mut rng = seeded(11);
        let (grids, _) = interference_corpus(1000, 16, &mut rng);
        train_diffusion(&grids, &DiffusionConfig::default(), &mut rng).unwrap()
    })
}

const TWO_CLUSTER_P: f64 = 0.7;

fn two_cluster_model() -> &'static DiffusionModel {
    static M: OnceLock<DiffusionModel> = OnceLock::new();
    M.get_or_init(|| {
        let mut rng = seeded(12);
        let grids: Vec<ScenarioGrid> = two_cluster_corpus(1000, 16, TWO_CLUSTER_P, &mut rng)
            .into_iter()
            .map(|(g, _)| g)
            .collect();
        let cfg = DiffusionConfig {
            epochs: 60,
            ..DiffusionConfig::default()
        };
        train_diffusion(&grids, &cfg, &mut rng).unwrap()
    })
}

#[test]
fn schedule_is_increasing_in_unit_interval() {
    let (betas, abars) = linear_schedule(&DiffusionConfig::default());
    assert_eq!(betas.len(), 50);
    assert!(betas.iter().all(|b| *b > 0.0 && *b < 1.0));
    assert!(betas.windows(2).all(|w| w[0] < w[1]));
    assert!(abars.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn zero_dataset_collapses_to_zero_grid() {
    let mut rng = seeded(1);
    let data = vec![ScenarioGrid::zeros(4); 64];
    let cfg = DiffusionConfig {
        epochs: 200,
        lr: 3e-3,
        ..small_diffusion()
    };
    let m = train_diffusion(&data, &cfg, &mut rng).unwrap();
    assert!(m.low_diversity);
    let c = Conditioning::default();
    let samples = m.sample_batch(&vec![c; 50], &mut rng);
    let mean_abs = samples.iter().map(|g| g.mean()).sum::<f64>() / 50.0;
    assert!(mean_abs < 0.05, "mean abs {mean_abs}");
}

#[test]
fn too_small_dataset_is_rejected() {
    let data = vec![ScenarioGrid::zeros(4); 3];
    assert!(matches!(
        train_diffusion(&data, &small_diffusion(), &mut seeded(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn diffusion_loss_decreases_on_corpus() {
    let m = corpus_model();
    let first = m.loss_curve[0];
    let last = *m.loss_curve.last().unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(!m.low_diversity);
}

#[test]
fn noise_regression_gradient_matches_finite_differences() {
    let mut rng = seeded(3);
    let cfg = small_diffusion();
    let g2 = cfg.grid * cfg.grid;
    let (_, abars) = linear_schedule(&cfg);
    let prior = DataPrior { mean: (0..g2).map(|i| -0.5 + 0.1 * i as f64 / g2 as f64).collect(), var: 0.3 };
    let sizes = [g2 + cfg.time_embed + COND_DIM, 6, 5, g2];
    let mut net = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng);
    let x0 = Array2::from_shape_fn((3, g2), |_| rng.random_range(-1.0..1.0));
    let eps = Array2::from_shape_fn((3, g2), |_| rng.sample(StandardNormal));
    let ts = [0, 17, 49];
    let conds = [
        Conditioning { jam: 0, load: 1 },
        Conditioning { jam: 2, load: 0 },
        Conditioning { jam: 1, load: 2 },
    ];
    let (_, grads) = noise_loss_grad(&net, &prior, &abars, cfg.time_embed, &x0, &ts, &eps, &conds);
    let analytic = grads.to_flat();
    let base = net.to_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..base.len()).step_by(7) {
        let mut p = base.clone();
        p[i] += h;
        net.read_flat(&p);
        let up = noise_loss_grad(&net, &prior, &abars, cfg.time_embed, &x0, &ts, &eps, &conds).0;
        p[i] -= 2.0 * h;
        net.read_flat(&p);
        let down = noise_loss_grad(&net, &prior, &abars, cfg.time_embed, &x0, &ts, &eps, &conds).0;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    net.read_flat(&base);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn sampling_is_deterministic_and_clamped() {
    let m = corpus_model();
    let c = Conditioning { jam: 1, load: 1 };
    let a = sample_grid(m, c, &mut seeded(5));
    let b = sample_grid(m, c, &mut seeded(5));
    assert_eq!(a, b);
    let samples = m.sample_batch(&vec![c; 1000], &mut seeded(6));
    assert!(samples.iter().all(|g| g.is_valid() && g.values.len() == 256));
}

#[test]
fn two_cluster_frequencies_are_recovered() {
    let m = two_cluster_model();
    let cents = two_cluster_centroids(16);
    let samples = m.sample_batch(&vec![Conditioning::default(); 1000], &mut seeded(7));
    let first = samples.iter().filter(|g| nearest_centroid(g, &cents) == 0).count() as f64 / 1000.0;
    assert!((first - TWO_CLUSTER_P).abs() <= 0.1, "first-cluster frequency {first}");
}

#[test]
fn high_jam_class_samples_are_hotter() {
    let m = corpus_model();
    let hi = Conditioning { jam: 2, load: 1 };
    let lo = Conditioning { jam: 0, load: 1 };
    let mut wins = 0;
    for seed in 0..20 {
        let mh = m.sample_batch(&vec![hi; 10], &mut seeded(100 + seed)).iter().map(|g| g.mean()).sum::<f64>();
        let ml = m.sample_batch(&vec![lo; 10], &mut seeded(100 + seed)).iter().map(|g| g.mean()).sum::<f64>();
        wins += (mh > ml) as usize;
    }
    // Sign test: 16 of 20 has p < 0.01 under the null of equal means.
    assert!(wins >= 16, "high beat low in {wins}/20 paired seeds");
}

fn small_events(ctx: usize) -> EventModelConfig {
    EventModelConfig {
        d_model: 6,
        d_ff: 5,
        context: ctx,
        ..EventModelConfig::default()
    }
}

fn seq(c: Conditioning, evs: &[(EventKind, u32, Option<[u8; 2]>, u8)]) -> EventSequence {
    EventSequence {
        conditioning: c,
        events: evs
            .iter()
            .map(|&(k, t, loc, m)| {
                let mut e = Event::new(k, t);
                e.location = loc;
                e.magnitude = m;
                e
            })
            .collect(),
    }
}

#[test]
fn event_model_gradient_matches_finite_differences() {
    let mut rng = seeded(8);
    let mut m = EventModel::new(small_events(12), &mut rng);
    let s1 = seq(
        Conditioning { jam: 1, load: 2 },
        &[(EventKind::JammerOn, 5, Some([2, 9]), 1), (EventKind::TrafficSurge, 7, None, 2)],
    );
    let s2 = seq(Conditioning { jam: 0, load: 0 }, &[(EventKind::NodeFail, 20, Some([15, 0]), 0)]);
    let toks = vec![tokenize(&s1, 16).unwrap(), tokenize(&s2, 16).unwrap()];
    let (_, g) = m.loss_and_grad(&toks);
    let base = m.params.clone();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..base.len()).step_by(5) {
        m.params[i] = base[i] + h;
        let up = m.loss_and_grad(&toks).0;
        m.params[i] = base[i] - h;
        let down = m.loss_and_grad(&toks).0;
        m.params[i] = base[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn next_token_distribution_sums_to_one() {
    let m = EventModel::new(EventModelConfig::default(), &mut seeded(9));
    for prefix in [vec![BOS], vec![BOS, 3], vec![BOS, 3, 6], vec![BOS, 3, 6, 9, 14]] {
        let p = m.next_distribution(&prefix, 1.0);
        assert_eq!(p.len(), VOCAB);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn tokenization_round_trips_bucket_aligned_events() {
    let s = seq(
        Conditioning { jam: 2, load: 1 },
        &[
            (EventKind::JammerOn, 10, Some([2, 6]), 2),
            (EventKind::TrafficSurge, 12, None, 1),
            (EventKind::NodeFail, 32, Some([14, 14]), 0),
        ],
    );
    let t = tokenize(&s, 16).unwrap();
    assert_eq!(t.len(), 3 + 4 * 3 + 1);
    assert_eq!(detokenize(&t, 16, 100), s.events);
}

#[test]
fn out_of_vocabulary_is_rejected_at_ingestion() {
    let bad_mag = seq(Conditioning::default(), &[(EventKind::TrafficSurge, 1, None, 7)]);
    let bad_loc = seq(Conditioning::default(), &[(EventKind::NodeFail, 1, Some([40, 0]), 0)]);
    let bad_cond = seq(Conditioning { jam: 3, load: 0 }, &[]);
    for s in [bad_mag, bad_loc, bad_cond] {
        assert!(matches!(
            train_event_model(&[s], &small_events(32), &mut seeded(0)),
            Err(Error::OutOfVocabulary(_))
        ));
    }
    assert!(matches!(
        train_event_model(&[], &small_events(32), &mut seeded(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn repeated_sequence_is_memorized() {
    let s = seq(
        Conditioning { jam: 1, load: 0 },
        &[
            (EventKind::JammerOn, 5, Some([6, 2]), 1),
            (EventKind::TrafficSurge, 7, None, 2),
            (EventKind::NodeFail, 17, Some([10, 10]), 0),
        ],
    );
    let corpus = vec![s.clone(); 16];
    let cfg = EventModelConfig {
        epochs: 60,
        ..EventModelConfig::default()
    };
    let m = train_event_model(&corpus, &cfg, &mut seeded(10)).unwrap();
    assert_eq!(greedy_tokens(&m, s.conditioning), tokenize(&s, 16).unwrap());
}

fn rule_model() -> &'static EventModel {
    static M: OnceLock<EventModel> = OnceLock::new();
    M.get_or_init(|| {
        let mut rng = seeded(13);
        let corpus = event_corpus(400, 16, 100, 6, &mut rng);
        assert!(corpus.iter().all(|s| jam_then_surge_rule(&s.events)));
        train_event_model(&corpus, &EventModelConfig::default(), &mut rng).unwrap()
    })
}

#[test]
fn perplexity_decreases() {
    let m = rule_model();
    assert!(m.perplexity_curve.last().unwrap() < &m.perplexity_curve[0]);
}

#[test]
fn generated_sequences_follow_jam_then_surge_rule() {
    let m = rule_model();
    let mut rng = seeded(14);
    let mut ok = 0;
    for i in 0..500 {
        let c = Conditioning {
            jam: (i % 3) as u8,
            load: (i / 3 % 3) as u8,
        };
        let evs = sample_events(m, c, &[], 1000, 1.0, &mut rng).unwrap();
        ok += jam_then_surge_rule(&evs) as usize;
    }
    assert!(ok >= 450, "rule held in {ok}/500");
}

#[test]
fn sampled_times_respect_horizon() {
    let m = rule_model();
    let mut rng = seeded(15);
    for i in 0..500 {
        let horizon = 5 + (i % 60) as u32;
        let c = Conditioning {
            jam: (i % 3) as u8,
            load: 1,
        };
        let evs = sample_events(m, c, &[], horizon, 1.0, &mut rng).unwrap();
        assert!(evs.iter().all(|e| e.time <= horizon));
        assert!(evs.windows(2).all(|w| w[0].time <= w[1].time));
    }
}

#[test]
fn event_sampling_edge_cases() {
    let m = rule_model();
    let c = Conditioning { jam: 2, load: 2 };
    assert!(sample_events(m, c, &[], 0, 1.0, &mut seeded(1)).unwrap().is_empty());
    let prefix = [Event::new(EventKind::TrafficSurge, 3)];
    let a = sample_events(m, c, &prefix, 100, 1.0, &mut seeded(2)).unwrap();
    let b = sample_events(m, c, &prefix, 100, 1.0, &mut seeded(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].kind, EventKind::TrafficSurge);
    assert_eq!(a[0].time, 2);
}

fn net() -> NetConfig {
    NetConfig::default()
}

#[test]
fn benign_scenario_is_accepted() {
    let s = Scenario::benign(16);
    assert_eq!(feasibility_check(&s, &ScenarioConfig::default(), &net()), Feasibility::Accept);
    let built = assemble_scenario(ScenarioGrid::zeros(16), vec![], 1.0, &ScenarioConfig::default(), &net(), |_| None)
        .unwrap();
    assert!(built.standing_jammers(&ScenarioConfig::default(), &net()).is_empty());
}

fn rule_of(f: Feasibility) -> &'static str {
    match f {
        Feasibility::Reject { rule, .. } => rule,
        Feasibility::Accept => "accept",
    }
}

#[test]
fn gateway_failure_is_rejected() {
    let mut e = Event::new(EventKind::NodeFail, 10);
    e.target = Some(net().n_agents);
    let s = Scenario::new(ScenarioGrid::zeros(16), vec![e], 1.0, ScenarioLabel::Scripted);
    assert_eq!(rule_of(feasibility_check(&s, &ScenarioConfig::default(), &net())), "gateway-fail");
}

#[test]
fn fully_jammed_grid_has_no_corridor() {
    let mut g = ScenarioGrid::zeros(16);
    g.values.iter_mut().for_each(|v| *v = 1.0);
    let s = Scenario::new(g, vec![], 1.0, ScenarioLabel::Generated);
    assert_eq!(rule_of(feasibility_check(&s, &ScenarioConfig::default(), &net())), "no-clear-corridor");
}

#[test]
fn other_rules_fire_with_their_ids() {
    let cfg = ScenarioConfig::default();
    let mk = |evs: Vec<Event>, load: f64| Scenario::new(ScenarioGrid::zeros(16), evs, load, ScenarioLabel::Generated);
    assert_eq!(rule_of(feasibility_check(&mk(vec![], 5.0), &cfg, &net())), "load-cap");
    let late = Event::new(EventKind::TrafficSurge, 150);
    assert_eq!(rule_of(feasibility_check(&mk(vec![late], 1.0), &cfg, &net())), "horizon");
    let fails: Vec<Event> = (0..3).map(|t| Event::new(EventKind::NodeFail, t)).collect();
    assert_eq!(rule_of(feasibility_check(&mk(fails, 1.0), &cfg, &net())), "max-failed");
    let small_jam = |t: u32, x: u8| {
        let mut e = Event::new(EventKind::JammerOn, t);
        e.location = Some([x, 0]);
        e.radius_m = Some(50.0);
        e
    };
    let jams: Vec<Event> = (0..4).map(|i| small_jam(i, 2 * i as u8)).collect();
    assert_eq!(rule_of(feasibility_check(&mk(jams, 1.0), &cfg, &net())), "max-jammers");
    let mut unsorted = mk(vec![], 1.0);
    unsorted.events = vec![Event::new(EventKind::TrafficSurge, 9), Event::new(EventKind::TrafficSurge, 2)];
    assert_eq!(rule_of(feasibility_check(&unsorted, &cfg, &net())), "unsorted");
}

#[test]
fn saturated_cell_becomes_one_centred_jammer() {
    let mut g = ScenarioGrid::zeros(16);
    g.set(3, 12, 1.0);
    let s = Scenario::new(g, vec![], 1.0, ScenarioLabel::Generated);
    let js = s.standing_jammers(&ScenarioConfig::default(), &net());
    assert_eq!(js.len(), 1);
    let centre = cell_center([3, 12], 16, net().area_m);
    assert!((js[0].position[0] - centre[0]).abs() < 1e-9);
    assert!((js[0].position[1] - centre[1]).abs() < 1e-9);
    assert_eq!(js[0].loss_multiplier, 1.0);
}

#[test]
fn scripted_case_study_is_feasible_and_round_trips() {
    let s = Scenario::case_study(16);
    assert_eq!(feasibility_check(&s, &ScenarioConfig::default(), &net()), Feasibility::Accept);
    let back = Scenario::from_text(&s.to_text()).unwrap();
    assert_eq!(back, s);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("case.json");
    s.save(&path).unwrap();
    assert_eq!(Scenario::load(&path).unwrap(), s);

    let mut state = NetworkState::random(&net(), 1);
    let evs = s.instantiate(&mut state, 0, &ScenarioConfig::default()).unwrap();
    assert_eq!(state.jammers.len(), 1);
    assert!(!state.jammers[0].active);
    assert!(evs.iter().all(|e| e.kind == EventKind::TrafficSurge || e.target.is_some()));
}

#[test]
fn exhausted_retries_starve_the_generator() {
    let mut full = ScenarioGrid::zeros(16);
    full.values.iter_mut().for_each(|v| *v = 1.0);
    let cfg = ScenarioConfig {
        retry_cap: 3,
        ..ScenarioConfig::default()
    };
    let mut calls = 0;
    let r = assemble_scenario(full.clone(), vec![], 1.0, &cfg, &net(), |_| {
        calls += 1;
        Some((full.clone(), vec![], 1.0))
    });
    assert!(matches!(r, Err(Error::GeneratorStarved(3))));
    assert_eq!(calls, 3);
}

#[test]
fn assembly_sorts_events() {
    let evs = vec![Event::new(EventKind::TrafficSurge, 40), Event::new(EventKind::TrafficSurge, 4)];
    let s = assemble_scenario(ScenarioGrid::zeros(16), evs, 1.0, &ScenarioConfig::default(), &net(), |_| None).unwrap();
    assert_eq!(s.events[0].time, 4);
}

fn key(jam: u8, kinds: u8) -> ClusterKey {
    ClusterKey {
        conditioning: Conditioning { jam, load: 0 },
        kinds,
    }
}

#[test]
fn curriculum_weights() {
    let clusters = [key(0, 0), key(1, 1), key(2, 4)];
    let w = curriculum_resample(&[], &clusters, 1.0);
    assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));

    let rec = |c: ClusterKey, r: f64| PerformanceRecord {
        cluster: c,
        episode_return: r,
    };
    let hist = [rec(clusters[0], -10.0), rec(clusters[1], 10.0), rec(clusters[2], 10.0)];
    let w = curriculum_resample(&hist, &clusters, 1.0);
    assert!(w[0] > 0.9, "{w:?}");
    // By hand: 1 / (1 + 2 e^-20).
    assert!((w[0] - 1.0 / (1.0 + 2.0 * (-20f64).exp())).abs() < 1e-12);

    let same = [rec(clusters[0], 3.0), rec(clusters[1], 3.0), rec(clusters[2], 3.0)];
    let w = curriculum_resample(&same, &clusters, 0.5);
    assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn cluster_key_tracks_event_kinds() {
    let s = Scenario::case_study(16);
    let k = ClusterKey::of(&s);
    assert!(k.has(EventKind::JammerOn) && k.has(EventKind::NodeFail) && k.has(EventKind::TrafficSurge));
    assert!(!k.has(EventKind::JammerOff));
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn curriculum_is_a_distribution(
            returns in prop::collection::vec((0u8..3, 0u8..8, -50.0f64..50.0), 0..20),
            tau in 0.05f64..10.0,
        ) {
            let clusters: Vec<ClusterKey> = (0..3).flat_map(|j| (0..8).map(move |k| key(j, k))).collect();
            let hist: Vec<PerformanceRecord> = returns
                .iter()
                .map(|&(j, k, r)| PerformanceRecord { cluster: key(j, k), episode_return: r })
                .collect();
            let w = curriculum_resample(&hist, &clusters, tau);
            prop_assert!(w.iter().all(|x| *x >= 0.0 && x.is_finite()));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn generated_scenarios_all_pass_feasibility() {
    let mut rng = seeded(16);
    let cfg = GeneratorConfig::default();
    let gen = ScenarioGenerator::train(&cfg, &mut rng).unwrap();
    let pool = gen.generate_pool(1000, &net(), &mut rng).unwrap();
    for s in &pool {
        assert_eq!(feasibility_check(s, &cfg.scenario, &net()), Feasibility::Accept);
        assert_eq!(s.label, ScenarioLabel::Generated);
    }
}
