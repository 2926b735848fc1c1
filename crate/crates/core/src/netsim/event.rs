use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    JammerOn,
    JammerOff,
    NodeFail,
    NodeRecover,
    TrafficSurge,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::JammerOn,
        EventKind::JammerOff,
        EventKind::NodeFail,
        EventKind::NodeRecover,
        EventKind::TrafficSurge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, EventKind::JammerOn | EventKind::NodeFail)
    }
}

/// Loss multiplier per jammer magnitude bucket.
pub const JAM_LOSS_BUCKETS: [f64; 3] = [0.4, 0.6, 0.8];
/// Load factor per surge magnitude bucket.
pub const SURGE_FACTOR_BUCKETS: [f64; 3] = [1.5, 2.0, 3.0];

/// A timed scenario event.
///
/// `target` is a node index for `NodeFail`/`NodeRecover` and a jammer index for
/// `JammerOn`/`JammerOff` once the scenario has been instantiated. `location`
/// is a cell of the scenario grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub time: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<[u8; 2]>,
    #[serde(default)]
    pub magnitude: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    /// Explicit jammed channels; `None` derives them from the location.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_m: Option<f64>,
    /// Explicit loss multiplier overriding the magnitude bucket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    /// Explicit surge factor overriding the magnitude bucket.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<f64>,
}

impl Event {
    pub fn new(kind: EventKind, time: u32) -> Self {
        Event {
            kind,
            time,
            location: None,
            magnitude: 0,
            duration: None,
            target: None,
            channels: None,
            radius_m: None,
            loss: None,
            factor: None,
        }
    }

    pub fn node_fail(node: usize, time: u32) -> Self {
        Event {
            target: Some(node),
            ..Event::new(EventKind::NodeFail, time)
        }
    }

    pub fn node_recover(node: usize, time: u32) -> Self {
        Event {
            target: Some(node),
            ..Event::new(EventKind::NodeRecover, time)
        }
    }

    pub fn surge(factor: f64, time: u32, duration: u32) -> Self {
        Event {
            factor: Some(factor),
            duration: Some(duration),
            ..Event::new(EventKind::TrafficSurge, time)
        }
    }

    pub fn jammer_on(jammer: usize, time: u32) -> Self {
        Event {
            target: Some(jammer),
            ..Event::new(EventKind::JammerOn, time)
        }
    }

    pub fn jammer_off(jammer: usize, time: u32) -> Self {
        Event {
            target: Some(jammer),
            ..Event::new(EventKind::JammerOff, time)
        }
    }

    pub fn jam_loss(&self) -> f64 {
        self.loss
            .unwrap_or(JAM_LOSS_BUCKETS[(self.magnitude as usize).min(JAM_LOSS_BUCKETS.len() - 1)])
    }

    pub fn surge_factor(&self) -> f64 {
        self.factor.unwrap_or(
            SURGE_FACTOR_BUCKETS[(self.magnitude as usize).min(SURGE_FACTOR_BUCKETS.len() - 1)],
        )
    }
}
