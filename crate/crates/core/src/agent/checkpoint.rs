//! Checkpoint format (JSON, one object):
//!
//! ```text
//! { "format": "edgetwin-checkpoint", "format_version": 1,
//!   "config_hash": "<sha256 hex of the training config>",
//!   "shapes": { "actor": [in, h.., out], "critic": [in, h.., 1] },
//!   "params": <PolicyParams incl. targets and version> }
//! ```
//!
//! Floats are written with round-trip precision, so a save/load cycle is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::policy::PolicyParams;
use crate::error::{Error, Result};

pub const FORMAT: &str = "edgetwin-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shapes {
    pub actor: Vec<usize>,
    pub critic: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub config_hash: String,
    pub shapes: Shapes,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, config_hash: impl Into<String>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            shapes: Shapes {
                actor: params.actor.sizes.clone(),
                critic: params.critic.sizes.clone(),
            },
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if ck.format != FORMAT || ck.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format {} v{}",
                ck.format, ck.format_version
            )));
        }
        if ck.shapes.actor != ck.params.actor.sizes || ck.shapes.critic != ck.params.critic.sizes {
            return Err(Error::Parse("checkpoint shape header does not match weights".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingCheckpoint(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text)
    }
}
