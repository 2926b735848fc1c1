//! Parameterised synthetic corpora with known generating processes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::events::{EventSequence, DT_BUCKETS, LOC_SIDE};
use super::scenario::{Conditioning, ScenarioGrid};
use crate::netsim::{Event, EventKind, SURGE_FACTOR_BUCKETS};

/// Scripts keep the product of overlapping surges at or below this.
const MAX_SURGE_LOAD: f64 = 2.0;
/// Surge length the scripts assume when checking overlap.
const SURGE_DURATION: u32 = 20;

/// Tertile boundaries used to turn raw jammer counts and load levels into
/// conditioning classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassBounds {
    pub jam: [f64; 2],
    pub load: [f64; 2],
}

impl ClassBounds {
    pub fn classify(&self, jammers: f64, load: f64) -> Conditioning {
        let cls = |v: f64, b: [f64; 2]| (v > b[0]) as u8 + (v > b[1]) as u8;
        Conditioning {
            jam: cls(jammers, self.jam),
            load: cls(load, self.load),
        }
    }
}

fn tertiles(mut v: Vec<f64>) -> [f64; 2] {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    [q(1.0 / 3.0), q(2.0 / 3.0)]
}

/// Gaussian hot spot of amplitude `amp` and width `sigma` (cells).
pub fn add_blob(g: &mut ScenarioGrid, cx: f64, cy: f64, amp: f64, sigma: f64) {
    for y in 0..g.size {
        for x in 0..g.size {
            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
            let cur = g.at(x, y);
            g.set(x, y, cur.max(v).min(1.0));
        }
    }
}

/// Random layouts of 0..=3 jamming hot spots plus a load level, labelled
/// with tertile classes of the corpus itself.
pub fn interference_corpus(n: usize, size: usize, rng: &mut impl Rng) -> (Vec<ScenarioGrid>, ClassBounds) {
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..=3usize);
        let load: f64 = rng.random_range(0.6..2.0);
        let mut g = ScenarioGrid::zeros(size);
        for _ in 0..k {
            let cx = rng.random_range(0.0..size as f64);
            let cy = rng.random_range(0.0..size as f64);
            add_blob(&mut g, cx, cy, rng.random_range(0.6..1.0), rng.random_range(1.0..2.5));
        }
        raw.push((g, k as f64, load));
    }
    let bounds = ClassBounds {
        jam: tertiles(raw.iter().map(|r| r.1).collect()),
        load: tertiles(raw.iter().map(|r| r.2).collect()),
    };
    let grids = raw
        .into_iter()
        .map(|(mut g, k, l)| {
            g.conditioning = bounds.classify(k, l);
            g
        })
        .collect();
    (grids, bounds)
}

/// Centroids of the two-cluster distribution: hot top-left or hot
/// bottom-right quadrant.
pub fn two_cluster_centroids(size: usize) -> [ScenarioGrid; 2] {
    let s = size as f64;
    let mut a = ScenarioGrid::zeros(size);
    add_blob(&mut a, s * 0.25, s * 0.25, 0.9, s / 8.0);
    let mut b = ScenarioGrid::zeros(size);
    add_blob(&mut b, s * 0.75, s * 0.75, 0.9, s / 8.0);
    [a, b]
}

/// Draws from the two-cluster mixture with `p_first` weight on the first
/// centroid, jittered slightly. Returns grids and their true cluster.
pub fn two_cluster_corpus(n: usize, size: usize, p_first: f64, rng: &mut impl Rng) -> Vec<(ScenarioGrid, usize)> {
    let s = size as f64;
    (0..n)
        .map(|_| {
            let which = if rng.random_bool(p_first) { 0 } else { 1 };
            let c = if which == 0 { 0.25 } else { 0.75 };
            let mut g = ScenarioGrid::zeros(size);
            add_blob(
                &mut g,
                s * c + rng.random_range(-0.5..0.5),
                s * c + rng.random_range(-0.5..0.5),
                rng.random_range(0.8..1.0),
                s / 8.0,
            );
            (g, which)
        })
        .collect()
}

/// Index of the nearest centroid (squared distance).
pub fn nearest_centroid(g: &ScenarioGrid, centroids: &[ScenarioGrid]) -> usize {
    let d = |c: &ScenarioGrid| -> f64 { g.values.iter().zip(&c.values).map(|(a, b)| (a - b).powi(2)).sum() };
    (0..centroids.len())
        .min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b])))
        .unwrap_or(0)
}

/// True iff every `JammerOn` is immediately followed by a `TrafficSurge`
/// within the first three time-delta buckets (at most 5 steps later).
pub fn jam_then_surge_rule(events: &[Event]) -> bool {
    events.iter().enumerate().all(|(i, e)| {
        e.kind != EventKind::JammerOn
            || events
                .get(i + 1)
                .is_some_and(|n| n.kind == EventKind::TrafficSurge && n.time - e.time <= DT_BUCKETS[2])
    })
}

/// A cell in one of the outer location buckets: scripted jammers approach
/// from the edge of the area rather than sitting on the gateway.
fn periphery_cell(size: usize, rng: &mut impl Rng) -> [u8; 2] {
    let per = (size / LOC_SIDE).max(1);
    loop {
        let bx = rng.random_range(0..LOC_SIDE);
        let by = rng.random_range(0..LOC_SIDE);
        if bx == 0 || by == 0 || bx == LOC_SIDE - 1 || by == LOC_SIDE - 1 {
            let pick = |b: usize| ((b * per + per / 2).min(size - 1)) as u8;
            return [pick(bx), pick(by)];
        }
    }
}

fn random_cell(size: usize, rng: &mut impl Rng) -> [u8; 2] {
    [rng.random_range(0..size) as u8, rng.random_range(0..size) as u8]
}

/// Composite attack scripts: jamming followed by a traffic surge, node
/// failures with later recoveries, and free-standing surges. More jamming
/// for higher jam classes. Every sequence satisfies [`jam_then_surge_rule`]
/// and fits in `max_events` events within `horizon`.
pub fn event_corpus(n: usize, size: usize, horizon: u32, max_events: usize, rng: &mut impl Rng) -> Vec<EventSequence> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = Conditioning {
            jam: rng.random_range(0..3),
            load: rng.random_range(0..3),
        };
        let mut events: Vec<Event> = Vec::new();
        let mut t = 0u32;
        let mut failed = 0usize;
        let mut jams_on = 0usize;
        // (end step, factor) of surges still running
        let mut surges: Vec<(u32, f64)> = Vec::new();
        let surge_ok = |surges: &[(u32, f64)], at: u32, mag: u8| {
            surges.iter().filter(|s| s.0 > at).map(|s| s.1).product::<f64>() * SURGE_FACTOR_BUCKETS[mag as usize]
                <= MAX_SURGE_LOAD
        };
        let p_jam = 0.15 + 0.2 * c.jam as f64;
        let target_len = rng.random_range(1..=max_events);
        while events.len() < target_len {
            let dt = DT_BUCKETS[rng.random_range(0..DT_BUCKETS.len())];
            if t + dt >= horizon {
                break;
            }
            t += dt;
            let u: f64 = rng.random();
            if u < p_jam && events.len() + 2 <= max_events && jams_on < 2 {
                let follow = DT_BUCKETS[rng.random_range(0..3)];
                let mag = rng.random_range(0..2).min(c.load);
                if t + follow >= horizon || !surge_ok(&surges, t + follow, mag) {
                    continue;
                }
                let mut on = Event::new(EventKind::JammerOn, t);
                on.location = Some(periphery_cell(size, rng));
                on.magnitude = rng.random_range(0..3);
                events.push(on);
                t += follow;
                let mut surge = Event::new(EventKind::TrafficSurge, t);
                surge.magnitude = mag;
                surges.push((t + SURGE_DURATION, SURGE_FACTOR_BUCKETS[mag as usize]));
                events.push(surge);
                jams_on += 1;
            } else if u < p_jam + 0.2 && failed < 2 {
                let mut f = Event::new(EventKind::NodeFail, t);
                f.location = Some(random_cell(size, rng));
                events.push(f);
                failed += 1;
            } else if u < p_jam + 0.35 && failed > 0 {
                let mut r = Event::new(EventKind::NodeRecover, t);
                r.location = Some(random_cell(size, rng));
                events.push(r);
                failed -= 1;
            } else if u < p_jam + 0.5 && jams_on > 0 {
                let mut off = Event::new(EventKind::JammerOff, t);
                off.location = events
                    .iter()
                    .rev()
                    .find(|e| e.kind == EventKind::JammerOn)
                    .and_then(|e| e.location);
                events.push(off);
                jams_on -= 1;
            } else {
                let mag = c.load.min(1);
                if surge_ok(&surges, t, mag) {
                    let mut s = Event::new(EventKind::TrafficSurge, t);
                    s.magnitude = mag;
                    surges.push((t + SURGE_DURATION, SURGE_FACTOR_BUCKETS[mag as usize]));
                    events.push(s);
                }
            }
        }
        if events.len() > max_events {
            continue;
        }
        // Canonicalise locations to token-bucket centres so the corpus
        // round-trips through tokenization exactly.
        let per = (size / LOC_SIDE).max(1);
        for e in &mut events {
            if let Some([x, y]) = e.location {
                let snap = |v: u8| (((v as usize / per) * per + per / 2).min(size - 1)) as u8;
                e.location = Some([snap(x), snap(y)]);
            }
        }
        out.push(EventSequence { conditioning: c, events });
    }
    out
}
