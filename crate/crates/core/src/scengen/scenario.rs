use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{dist, Event, EventKind, Jammer, NetConfig, NetworkState};

pub const SCENARIO_FORMAT_VERSION: u32 = 1;

/// Tertile classes (0 low, 1 mid, 2 high) of jammer count and load level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Conditioning {
    pub jam: u8,
    pub load: u8,
}

/// Square interference-intensity map over the area, row-major, `y` major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    pub size: usize,
    pub values: Vec<f64>,
    pub conditioning: Conditioning,
}

impl ScenarioGrid {
    pub fn zeros(size: usize) -> Self {
        ScenarioGrid {
            size,
            values: vec![0.0; size * size],
            conditioning: Conditioning::default(),
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.size + x] = v;
    }

    pub fn is_valid(&self) -> bool {
        self.values.len() == self.size * self.size
            && self.values.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioLabel {
    Generated,
    Replayed,
    Scripted,
}

/// An interference grid plus a time-ordered event list, with times relative to
/// the episode start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub grid: ScenarioGrid,
    pub events: Vec<Event>,
    pub load_multiplier: f64,
    pub label: ScenarioLabel,
}

/// Domain rules and assembly knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub horizon: u32,
    pub max_jammers: usize,
    /// Upper bound on the fraction of coarse cells inside some jammer's radius.
    pub max_jam_fraction: f64,
    pub max_failed: usize,
    pub load_cap: f64,
    /// Connected cells at or above this intensity form a jammer footprint...
    pub jam_threshold: f64,
    /// ...but only footprints peaking at or above this one become jammers.
    pub jam_seed: f64,
    /// Radius of event jammers that do not carry their own.
    pub event_jam_radius_m: f64,
    /// Coarse grid used for area and corridor checks.
    pub coarse_cells: usize,
    pub retry_cap: usize,
    pub default_surge_duration: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            horizon: 100,
            max_jammers: 3,
            max_jam_fraction: 0.5,
            max_failed: 2,
            load_cap: 3.0,
            jam_threshold: 0.5,
            jam_seed: 0.7,
            event_jam_radius_m: 600.0,
            coarse_cells: 8,
            retry_cap: 20,
            default_surge_duration: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Feasibility {
    Accept,
    Reject { rule: &'static str, detail: String },
}

impl Feasibility {
    pub fn is_accept(&self) -> bool {
        matches!(self, Feasibility::Accept)
    }

    fn reject(rule: &'static str, detail: impl Into<String>) -> Self {
        Feasibility::Reject {
            rule,
            detail: detail.into(),
        }
    }
}

/// Grid cell coordinates to the metric position of the cell center.
pub fn cell_center(cell: [u8; 2], grid_size: usize, area_m: f64) -> [f64; 2] {
    let w = area_m / grid_size as f64;
    [(cell[0] as f64 + 0.5) * w, (cell[1] as f64 + 0.5) * w]
}

/// Channels jammed when an event does not name them: every channel except
/// one escape channel chosen from the cell.
pub fn default_jam_channels(cell: [u8; 2], n_channels: usize) -> Vec<usize> {
    if n_channels <= 1 {
        return vec![0];
    }
    let free = (cell[0] as usize + cell[1] as usize) % n_channels;
    (0..n_channels).filter(|&c| c != free).collect()
}

impl Scenario {
    pub fn new(grid: ScenarioGrid, events: Vec<Event>, load_multiplier: f64, label: ScenarioLabel) -> Self {
        Scenario {
            version: SCENARIO_FORMAT_VERSION,
            grid,
            events,
            load_multiplier,
            label,
        }
    }

    pub fn benign(grid_size: usize) -> Self {
        Scenario::new(ScenarioGrid::zeros(grid_size), Vec::new(), 1.0, ScenarioLabel::Scripted)
    }

    /// The composite attack used for the case study: a 1 km jammer switches
    /// on near the west edge at t=50, traffic doubles over t=55..85 and the
    /// node nearest the jammer fails at t=60.
    pub fn case_study(grid_size: usize) -> Self {
        let edge = [1u8, (grid_size / 2) as u8];
        let mut jam = Event::new(EventKind::JammerOn, 50);
        jam.location = Some(edge);
        jam.magnitude = 2;
        jam.radius_m = Some(1000.0);
        // Broadband enough to hit the default channel; one channel stays clear.
        jam.channels = Some(vec![0, 1]);
        let mut surge = Event::new(EventKind::TrafficSurge, 55);
        surge.factor = Some(2.0);
        surge.duration = Some(30);
        let mut fail = Event::new(EventKind::NodeFail, 60);
        fail.location = Some(edge);
        Scenario::new(ScenarioGrid::zeros(grid_size), vec![jam, surge, fail], 1.0, ScenarioLabel::Scripted)
    }

    /// Jamming or failures anywhere in the scenario, standing jammers included.
    pub fn is_adversarial(&self, cfg: &ScenarioConfig) -> bool {
        self.events.iter().any(|e| e.kind.is_adversarial()) || !self.standing_cells(cfg).is_empty()
    }

    /// Connected components (4-neighbourhood) of cells at or above the jam
    /// threshold whose peak reaches the seed level.
    pub fn standing_cells(&self, cfg: &ScenarioConfig) -> Vec<Vec<(usize, usize)>> {
        let threshold = cfg.jam_threshold;
        let g = &self.grid;
        let n = g.size;
        let mut seen = vec![false; n * n];
        let mut comps = Vec::new();
        for y in 0..n {
            for x in 0..n {
                if seen[y * n + x] || g.at(x, y) < threshold {
                    continue;
                }
                let mut comp = Vec::new();
                let mut q = VecDeque::from([(x, y)]);
                seen[y * n + x] = true;
                while let Some((cx, cy)) = q.pop_front() {
                    comp.push((cx, cy));
                    let mut nb = Vec::with_capacity(4);
                    if cx > 0 {
                        nb.push((cx - 1, cy));
                    }
                    if cy > 0 {
                        nb.push((cx, cy - 1));
                    }
                    if cx + 1 < n {
                        nb.push((cx + 1, cy));
                    }
                    if cy + 1 < n {
                        nb.push((cx, cy + 1));
                    }
                    for (nx, ny) in nb {
                        if !seen[ny * n + nx] && g.at(nx, ny) >= threshold {
                            seen[ny * n + nx] = true;
                            q.push_back((nx, ny));
                        }
                    }
                }
                if comp.iter().any(|&(x, y)| g.at(x, y) >= cfg.jam_seed) {
                    comps.push(comp);
                }
            }
        }
        comps
    }

    /// Standing jammers derived from the grid: one per hot component, at its
    /// intensity-weighted centroid, loss equal to the peak intensity.
    pub fn standing_jammers(&self, cfg: &ScenarioConfig, net: &NetConfig) -> Vec<Jammer> {
        let g = &self.grid;
        let w = net.area_m / g.size as f64;
        self.standing_cells(cfg)
            .into_iter()
            .map(|comp| {
                let (mut sx, mut sy, mut sw, mut peak) = (0.0, 0.0, 0.0, 0.0f64);
                for &(x, y) in &comp {
                    let v = g.at(x, y);
                    sx += v * (x as f64 + 0.5);
                    sy += v * (y as f64 + 0.5);
                    sw += v;
                    peak = peak.max(v);
                }
                let centre = [sx / sw * w, sy / sw * w];
                let cell = [(sx / sw) as u8, (sy / sw) as u8];
                Jammer {
                    position: centre,
                    radius: w * (0.5 + (comp.len() as f64 / std::f64::consts::PI).sqrt()),
                    active: true,
                    affected_channels: default_jam_channels(cell, net.n_channels),
                    loss_multiplier: peak,
                    hidden: false,
                }
            })
            .collect()
    }

    fn event_jammer(&self, e: &Event, net: &NetConfig, cfg: &ScenarioConfig) -> Jammer {
        let cell = e.location.unwrap_or([(self.grid.size / 2) as u8; 2]);
        Jammer {
            position: cell_center(cell, self.grid.size, net.area_m),
            radius: e.radius_m.unwrap_or(cfg.event_jam_radius_m),
            active: false,
            affected_channels: e
                .channels
                .clone()
                .unwrap_or_else(|| default_jam_channels(cell, net.n_channels)),
            loss_multiplier: e.jam_loss(),
            hidden: false,
        }
    }

    /// Install the scenario into `state`: standing jammers go live, event
    /// jammers are added switched off, and the returned events carry absolute
    /// times offset by `start_step` and concrete targets.
    pub fn instantiate(
        &self,
        state: &mut NetworkState,
        start_step: u32,
        cfg: &ScenarioConfig,
    ) -> Result<Vec<Event>> {
        let net = state.cfg.clone();
        state.load_multiplier = self.load_multiplier;
        state.jammers.extend(self.standing_jammers(cfg, &net));
        let mut out = Vec::with_capacity(self.events.len());
        let mut created: Vec<(Option<[u8; 2]>, usize)> = Vec::new();
        let mut failed: Vec<usize> = Vec::new();
        for e in &self.events {
            let mut r = e.clone();
            r.time = e.time + start_step;
            match e.kind {
                EventKind::JammerOn => {
                    if e.target.is_none() {
                        state.jammers.push(self.event_jammer(e, &net, cfg));
                        let idx = state.jammers.len() - 1;
                        created.push((e.location, idx));
                        r.target = Some(idx);
                    }
                }
                EventKind::JammerOff => {
                    if e.target.is_none() {
                        let hit = created
                            .iter()
                            .rev()
                            .find(|(loc, _)| *loc == e.location)
                            .or(created.last());
                        match hit {
                            Some(&(_, idx)) => r.target = Some(idx),
                            None => continue,
                        }
                    }
                }
                EventKind::NodeFail => {
                    if e.target.is_none() {
                        let at = self.location_pos(e, &net);
                        let pick = (0..state.n_agents())
                            .filter(|i| state.nodes[*i].alive && !failed.contains(i))
                            .min_by(|&a, &b| {
                                dist(state.nodes[a].position, at)
                                    .total_cmp(&dist(state.nodes[b].position, at))
                                    .then(a.cmp(&b))
                            });
                        match pick {
                            Some(i) => r.target = Some(i),
                            None => continue,
                        }
                    }
                    failed.extend(r.target);
                }
                EventKind::NodeRecover => {
                    if e.target.is_none() {
                        let at = self.location_pos(e, &net);
                        let pick = failed.iter().copied().min_by(|&a, &b| {
                            dist(state.nodes[a].position, at)
                                .total_cmp(&dist(state.nodes[b].position, at))
                                .then(a.cmp(&b))
                        });
                        match pick {
                            Some(i) => r.target = Some(i),
                            None => continue,
                        }
                    }
                    failed.retain(|&f| Some(f) != r.target);
                }
                EventKind::TrafficSurge => {
                    if r.duration.is_none() {
                        r.duration = Some(cfg.default_surge_duration);
                    }
                }
            }
            out.push(r);
        }
        out.sort_by_key(|e| e.time);
        Ok(out)
    }

    fn location_pos(&self, e: &Event, net: &NetConfig) -> [f64; 2] {
        e.location
            .map(|c| cell_center(c, self.grid.size, net.area_m))
            .unwrap_or([net.area_m / 2.0; 2])
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if s.version != SCENARIO_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported scenario version {}", s.version)));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Apply the domain rules. Every rejection names the rule that fired.
pub fn feasibility_check(s: &Scenario, cfg: &ScenarioConfig, net: &NetConfig) -> Feasibility {
    if !s.grid.is_valid() {
        return Feasibility::reject("bad-grid", "grid entries must be finite and within [0, 1]");
    }
    if !(s.load_multiplier.is_finite() && s.load_multiplier > 0.0) {
        return Feasibility::reject("load-cap", format!("load multiplier {}", s.load_multiplier));
    }
    if s.events.windows(2).any(|w| w[0].time > w[1].time) {
        return Feasibility::reject("unsorted", "events must be time-ordered");
    }
    if let Some(e) = s.events.iter().find(|e| e.time >= cfg.horizon) {
        return Feasibility::reject("horizon", format!("event at t={} beyond horizon {}", e.time, cfg.horizon));
    }
    let gateway = net.n_agents;
    if s
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::NodeFail | EventKind::NodeRecover) && e.target == Some(gateway))
    {
        return Feasibility::reject("gateway-fail", "the gateway cannot fail");
    }
    if let Some(e) = s.events.iter().find(|e| {
        e.location
            .is_some_and(|l| l[0] as usize >= s.grid.size || l[1] as usize >= s.grid.size)
            || e.magnitude > 2
            || e.target.is_some_and(|t| matches!(e.kind, EventKind::NodeFail | EventKind::NodeRecover) && t > gateway)
    }) {
        return Feasibility::reject("bad-event", format!("{:?} at t={} out of range", e.kind, e.time));
    }

    // Geometry is checked for every set of simultaneously active jammers:
    // standing ones plus event jammers between their on and off events.
    let standing_js = s.standing_jammers(cfg, net);
    let c = cfg.coarse_cells;
    let w = net.area_m / c as f64;
    let geometry = |active: &[Jammer]| -> Option<Feasibility> {
        let jammed: Vec<bool> = (0..c * c)
            .map(|i| {
                let p = [((i % c) as f64 + 0.5) * w, ((i / c) as f64 + 0.5) * w];
                active.iter().any(|j| dist(j.position, p) <= j.radius)
            })
            .collect();
        if !clear_corridor(&jammed, c, net.gateway_pos(), w) {
            return Some(Feasibility::reject(
                "no-clear-corridor",
                "no unjammed cell path from the gateway to the map edge",
            ));
        }
        let frac = jammed.iter().filter(|j| **j).count() as f64 / (c * c) as f64;
        (frac > cfg.max_jam_fraction)
            .then(|| Feasibility::reject("jam-area", format!("jammed fraction {frac:.2} > {}", cfg.max_jam_fraction)))
    };
    if let Some(r) = geometry(&standing_js) {
        return r;
    }
    let mut live: Vec<(Option<[u8; 2]>, Jammer)> = Vec::new();
    for e in &s.events {
        match e.kind {
            EventKind::JammerOn if e.target.is_none() => {
                live.push((e.location, s.event_jammer(e, net, cfg)));
                let mut all = standing_js.clone();
                all.extend(live.iter().map(|(_, j)| j.clone()));
                if let Some(r) = geometry(&all) {
                    return r;
                }
            }
            EventKind::JammerOff if !live.is_empty() => {
                let i = live.iter().rposition(|(l, _)| *l == e.location).unwrap_or(live.len() - 1);
                live.remove(i);
            }
            _ => {}
        }
    }

    // Timeline: simultaneous jammers, failures and load.
    let standing = s.standing_cells(cfg).len();
    let mut active_jam = standing;
    let mut on_events: Vec<Option<[u8; 2]>> = Vec::new();
    let mut failed = 0usize;
    let mut surges: Vec<(u32, f64)> = Vec::new();
    if active_jam > cfg.max_jammers {
        return Feasibility::reject("max-jammers", format!("{active_jam} standing jammers"));
    }
    for e in &s.events {
        surges.retain(|(until, _)| *until > e.time);
        match e.kind {
            EventKind::JammerOn => {
                active_jam += 1;
                on_events.push(e.location);
                if active_jam > cfg.max_jammers {
                    return Feasibility::reject("max-jammers", format!("{active_jam} jammers at t={}", e.time));
                }
            }
            EventKind::JammerOff => {
                if !on_events.is_empty() {
                    let i = on_events.iter().rposition(|l| *l == e.location).unwrap_or(on_events.len() - 1);
                    on_events.remove(i);
                    active_jam -= 1;
                }
            }
            EventKind::NodeFail => {
                failed += 1;
                if failed > cfg.max_failed {
                    return Feasibility::reject("max-failed", format!("{failed} failed nodes at t={}", e.time));
                }
            }
            EventKind::NodeRecover => failed = failed.saturating_sub(1),
            EventKind::TrafficSurge => {
                surges.push((e.time + e.duration.unwrap_or(cfg.default_surge_duration), e.surge_factor()));
                let load = s.load_multiplier * surges.iter().map(|(_, f)| f).product::<f64>();
                if load > cfg.load_cap {
                    return Feasibility::reject("load-cap", format!("load {load:.2} at t={}", e.time));
                }
            }
        }
    }
    if s.load_multiplier > cfg.load_cap {
        return Feasibility::reject("load-cap", format!("load multiplier {}", s.load_multiplier));
    }
    Feasibility::Accept
}

/// Breadth-first search over unjammed coarse cells from the gateway's cell to
/// any boundary cell.
fn clear_corridor(jammed: &[bool], c: usize, gateway: [f64; 2], w: f64) -> bool {
    let gx = ((gateway[0] / w) as usize).min(c - 1);
    let gy = ((gateway[1] / w) as usize).min(c - 1);
    let start = gy * c + gx;
    if jammed[start] {
        return false;
    }
    let mut seen = vec![false; c * c];
    seen[start] = true;
    let mut q = VecDeque::from([start]);
    while let Some(i) = q.pop_front() {
        let (x, y) = (i % c, i / c);
        if x == 0 || y == 0 || x == c - 1 || y == c - 1 {
            return true;
        }
        for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
            let j = ny * c + nx;
            if !seen[j] && !jammed[j] {
                seen[j] = true;
                q.push_back(j);
            }
        }
    }
    false
}

/// Translate a grid and events into a scenario, resampling rejected
/// assemblies through `resample` up to the retry cap.
pub fn assemble_scenario(
    grid: ScenarioGrid,
    mut events: Vec<Event>,
    load: f64,
    cfg: &ScenarioConfig,
    net: &NetConfig,
    mut resample: impl FnMut(usize) -> Option<(ScenarioGrid, Vec<Event>, f64)>,
) -> Result<Scenario> {
    events.sort_by_key(|e| e.time);
    let mut s = Scenario::new(grid, events, load, ScenarioLabel::Generated);
    for attempt in 0..=cfg.retry_cap {
        if feasibility_check(&s, cfg, net).is_accept() {
            return Ok(s);
        }
        if attempt == cfg.retry_cap {
            break;
        }
        match resample(attempt) {
            Some((g, mut ev, l)) => {
                ev.sort_by_key(|e| e.time);
                s = Scenario::new(g, ev, l, ScenarioLabel::Generated);
            }
            None => break,
        }
    }
    Err(Error::GeneratorStarved(cfg.retry_cap))
}
